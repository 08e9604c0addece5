// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cli.hpp
 * @brief  Command-line front end: plan | train | verify | sweep
 */
#pragma once

#include <ostream>

namespace nnplan {

/// Runs the command line; returns the process exit code. Diagnostics go to
/// `err`, everything else to `out`.
int run_cli(int argc, const char *const *argv, std::ostream &out,
            std::ostream &err);

} // namespace nnplan
