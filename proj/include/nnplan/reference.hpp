// SPDX-License-Identifier: Apache-2.0
/**
 * @file   reference.hpp
 * @brief  Naive reverse-mode trainer used as a correctness oracle
 *
 * Every activation and derivative gets a fresh double-precision buffer,
 * layers are evaluated with textbook loops (direct convolution, no im2col),
 * and nothing from the execution-order, merging, planning, arena or swap
 * code is used. Only model parsing, shape inference and weight init are
 * shared with the main path, so both start from identical inputs.
 */
#pragma once

#include <nnplan/data.hpp>
#include <nnplan/graph.hpp>

#include <map>
#include <string>
#include <vector>

namespace nnplan::reference {

using Weights = std::map<std::string, std::vector<double>>;

/// Initial weights by layer id, identical to the training session's.
Weights initial_weights(const ModelGraph &model);

struct Gradients {
  double loss = 0.0;
  /// trainable layers only
  Weights grads;
};

/// Loss of one batch.
double loss(const ModelGraph &model, const Weights &w,
            const std::vector<double> &input, const std::vector<double> &label);

/// Loss and weight gradients of one batch (before clipping).
Gradients gradients(const ModelGraph &model, const Weights &w,
                    const std::vector<double> &input,
                    const std::vector<double> &label);

struct Result {
  Weights weights;
  std::vector<double> losses;
};

/// SGD (with global-norm clipping when configured) for `steps` iterations
/// over the queue's batches in order.
Result train(const ModelGraph &model, const BatchQueue &queue,
             std::size_t steps);

} // namespace nnplan::reference
