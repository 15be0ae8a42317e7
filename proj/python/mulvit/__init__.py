"""Multi-view signal-strength estimation toolkit.

Thin wrapper over the compiled extension. All heavy lifting (model math,
training, rendering, conditioning) happens in the C++ core; this package
re-exports the operations with numpy-friendly signatures:

- ``analyze(variant)``: parameter/FLOP counts for a named preset
- ``preset_names()``: the built-in presets
- ``preprocess(timestamps_us, values_dbm, ...)``: signal conditioning chain
- ``compute_metrics(pred_dbm, target_dbm)``: RMSE/MAE/r/R^2/coverage/CDF
- ``generate_dataset(out_dir, frames, ...)``: synthetic two-camera scene
- ``dataset_info(data_dir)``: geometry and labels of an on-disk dataset
- ``predict(checkpoint, data_dir, split)``: checkpoint inference + metrics
- ``run_cli(args)``: the full command-line front end, in-process
"""

try:  # installed wheel: extension lives inside the package
    from ._mulvit import (
        analyze,
        compute_metrics,
        dataset_info,
        generate_dataset,
        predict,
        preprocess,
        preset_names,
        run_cli,
    )
except ImportError:  # in-tree build: extension sits on sys.path
    from _mulvit import (
        analyze,
        compute_metrics,
        dataset_info,
        generate_dataset,
        predict,
        preprocess,
        preset_names,
        run_cli,
    )

__all__ = [
    "analyze",
    "compute_metrics",
    "dataset_info",
    "generate_dataset",
    "predict",
    "preprocess",
    "preset_names",
    "run_cli",
]

__version__ = "1.0.0"
