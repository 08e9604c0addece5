// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Data producers and the batch queue
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace nnplan {

/// Source of (input, label) samples; sample i is the same on every call.
class DataProducer {
public:
  virtual ~DataProducer() = default;
  virtual std::size_t size() const = 0;
  virtual std::size_t input_size() const = 0;
  virtual std::size_t label_size() const = 0;
  virtual void sample(std::size_t index, std::span<float> input,
                      std::span<float> label) const = 0;
};

enum class Distribution : std::uint8_t { uniform, normal };

enum class LabelRule : std::uint8_t {
  random,          ///< labels drawn from the input distribution
  scaled_identity, ///< y = scale * x (needs equal sizes)
  linear_teacher   ///< y = x * T with a fixed random T, scaled by 1/sqrt(in)
};

Distribution parse_distribution(std::string_view text);
LabelRule parse_label_rule(std::string_view text);

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t count = 1;
  std::size_t input_size = 1;
  std::size_t label_size = 1;
  Distribution distribution = Distribution::uniform;
  LabelRule rule = LabelRule::linear_teacher;
  float scale = 1.0f;
};

/// Deterministic synthetic data, generated up front.
class SyntheticData : public DataProducer {
public:
  explicit SyntheticData(const SyntheticSpec &spec);
  std::size_t size() const override { return spec_.count; }
  std::size_t input_size() const override { return spec_.input_size; }
  std::size_t label_size() const override { return spec_.label_size; }
  void sample(std::size_t index, std::span<float> input,
              std::span<float> label) const override;

private:
  SyntheticSpec spec_;
  std::vector<float> inputs_;
  std::vector<float> labels_;
};

/// Raw little-endian float32 records, each input_size inputs followed by
/// label_size labels.
class FileData : public DataProducer {
public:
  FileData(const std::filesystem::path &path, std::size_t input_size,
           std::size_t label_size);
  std::size_t size() const override { return count_; }
  std::size_t input_size() const override { return input_size_; }
  std::size_t label_size() const override { return label_size_; }
  void sample(std::size_t index, std::span<float> input,
              std::span<float> label) const override;

private:
  std::size_t input_size_, label_size_, count_ = 0;
  std::vector<float> records_;
};

/**
 * Groups samples into full batches in order. A trailing partial batch is
 * dropped, since every buffer is planned for a fixed batch size.
 */
class BatchQueue {
public:
  BatchQueue(const DataProducer &producer, std::size_t batch_size);

  std::size_t batches_per_epoch() const noexcept { return batches_; }
  std::size_t batch_size() const noexcept { return batch_; }
  /// Fills batch `index` (taken modulo batches_per_epoch).
  void fill(std::size_t index, std::span<float> input,
            std::span<float> label) const;

private:
  const DataProducer &producer_;
  std::size_t batch_;
  std::size_t batches_;
};

} // namespace nnplan
