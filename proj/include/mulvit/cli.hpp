#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mulvit::cli {

/// Batch command front end: gen / preprocess / train / eval / analyze.
/// `args` is the argument list without the program name. Normal output and
/// warnings go to `out`, errors to `err`; the return value is the process
/// exit code — 0 iff the command succeeded (warnings do not change it).
///
/// Global flags: `--seed` (overrides the config/scene seed when given) and
/// `--threads` (accepted for interface stability; execution is
/// single-threaded by design). Relative dataset directories (`--data`, and
/// `gen --out`) resolve against $MULVIT_DATA_ROOT when that variable is set.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mulvit::cli
