#pragma once

namespace subseg {

// Dispatches synth | pretrain | partition | train | eval | ablate.
// Returns the process exit code; failures print one machine-parsable
// "error <code>: <message>" line on stderr.
int run_cli(int argc, const char* const* argv);

}  // namespace subseg
