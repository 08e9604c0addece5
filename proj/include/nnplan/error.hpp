// SPDX-License-Identifier: Apache-2.0
/**
 * @file   error.hpp
 * @brief  Exception types shared by every stage of the runtime
 */
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nnplan {

/// Model description could not be parsed. line() is 1-based, 0 when unknown.
class ParseError : public std::runtime_error {
public:
  ParseError(std::size_t line, const std::string &what) :
    std::runtime_error(line ? "line " + std::to_string(line) + ": " + what
                            : what),
    line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

/// Graph is structurally invalid or shapes do not line up.
class GraphError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Planning or view resolution failed.
class PlanError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A tensor was requested outside its lifetime or while not resident.
class AccessError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Backing-store I/O failure, tagged with the tensor and EO involved.
class StorageError : public std::runtime_error {
public:
  StorageError(const std::string &tensor, int eo, const std::string &what) :
    std::runtime_error("swap I/O failed for '" + tensor + "' at EO " +
                       std::to_string(eo) + ": " + what),
    tensor_(tensor),
    eo_(eo) {}
  const std::string &tensor() const noexcept { return tensor_; }
  int eo() const noexcept { return eo_; }

private:
  std::string tensor_;
  int eo_;
};

/// Loss became non-finite.
class DivergenceError : public std::runtime_error {
public:
  explicit DivergenceError(std::size_t iteration) :
    std::runtime_error("loss diverged (non-finite) at iteration " +
                       std::to_string(iteration)),
    iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

private:
  std::size_t iteration_;
};

} // namespace nnplan
