// SPDX-License-Identifier: Apache-2.0
/**
 * @file   main.cpp
 * @brief  nnplan command-line entry point
 */
#include <nnplan/cli.hpp>

#include <iostream>

int main(int argc, char **argv) {
  return nnplan::run_cli(argc, argv, std::cout, std::cerr);
}
