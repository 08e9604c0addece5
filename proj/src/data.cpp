// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.cpp
 * @brief  Data producers and the batch queue
 */
#include <nnplan/data.hpp>

#include <nnplan/kernels.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace nnplan {

Distribution parse_distribution(std::string_view text) {
  if (text == "uniform")
    return Distribution::uniform;
  if (text == "normal")
    return Distribution::normal;
  throw std::invalid_argument("unknown distribution '" + std::string(text) +
                              "' (uniform, normal)");
}

LabelRule parse_label_rule(std::string_view text) {
  if (text == "random")
    return LabelRule::random;
  if (text == "identity" || text == "scaled_identity")
    return LabelRule::scaled_identity;
  if (text == "teacher" || text == "linear_teacher")
    return LabelRule::linear_teacher;
  throw std::invalid_argument("unknown label rule '" + std::string(text) +
                              "' (random, identity, teacher)");
}

SyntheticData::SyntheticData(const SyntheticSpec &spec) : spec_(spec) {
  if (spec.count == 0 || spec.input_size == 0 || spec.label_size == 0)
    throw std::invalid_argument("synthetic data needs non-empty shapes");
  if (spec.rule == LabelRule::scaled_identity &&
      spec.input_size != spec.label_size)
    throw std::invalid_argument(
      "identity labels need equal input and label sizes");

  kernels::Rng rng(spec.seed);
  auto draw = [&] {
    return spec.distribution == Distribution::uniform
             ? 2.0f * rng.uniform() - 1.0f
             : rng.normal();
  };
  inputs_.resize(spec.count * spec.input_size);
  for (auto &v : inputs_)
    v = draw();

  labels_.resize(spec.count * spec.label_size);
  switch (spec.rule) {
  case LabelRule::random:
    for (auto &v : labels_)
      v = draw();
    break;
  case LabelRule::scaled_identity:
    for (std::size_t i = 0; i < labels_.size(); ++i)
      labels_[i] = spec.scale * inputs_[i];
    break;
  case LabelRule::linear_teacher: {
    kernels::Rng trng(spec.seed ^ 0xa0761d6478bd642fULL);
    std::vector<float> T(spec.input_size * spec.label_size);
    for (auto &v : T)
      v = 2.0f * trng.uniform() - 1.0f;
    const double k =
      spec.scale / std::sqrt(static_cast<double>(spec.input_size));
    for (std::size_t s = 0; s < spec.count; ++s)
      for (std::size_t o = 0; o < spec.label_size; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < spec.input_size; ++i)
          acc += static_cast<double>(inputs_[s * spec.input_size + i]) *
                 T[i * spec.label_size + o];
        labels_[s * spec.label_size + o] = static_cast<float>(acc * k);
      }
    break;
  }
  }
}

void SyntheticData::sample(std::size_t index, std::span<float> input,
                           std::span<float> label) const {
  if (index >= spec_.count)
    throw std::out_of_range("sample index out of range");
  std::memcpy(input.data(), inputs_.data() + index * spec_.input_size,
              spec_.input_size * sizeof(float));
  std::memcpy(label.data(), labels_.data() + index * spec_.label_size,
              spec_.label_size * sizeof(float));
}

FileData::FileData(const std::filesystem::path &path, std::size_t input_size,
                   std::size_t label_size) :
  input_size_(input_size), label_size_(label_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot open data file " + path.string());
  const auto bytes = std::filesystem::file_size(path);
  const auto record = (input_size + label_size) * sizeof(float);
  if (record == 0 || bytes % record != 0)
    throw std::runtime_error("data file " + path.string() +
                             " is not a whole number of records");
  count_ = bytes / record;
  records_.resize(bytes / sizeof(float));
  in.read(reinterpret_cast<char *>(records_.data()),
          static_cast<std::streamsize>(bytes));
  if (!in)
    throw std::runtime_error("short read from " + path.string());
}

void FileData::sample(std::size_t index, std::span<float> input,
                      std::span<float> label) const {
  if (index >= count_)
    throw std::out_of_range("sample index out of range");
  const float *r = records_.data() + index * (input_size_ + label_size_);
  std::memcpy(input.data(), r, input_size_ * sizeof(float));
  std::memcpy(label.data(), r + input_size_, label_size_ * sizeof(float));
}

BatchQueue::BatchQueue(const DataProducer &producer, std::size_t batch_size) :
  producer_(producer), batch_(batch_size),
  batches_(batch_size ? producer.size() / batch_size : 0) {
  if (batches_ == 0)
    throw std::invalid_argument("dataset has " +
                                std::to_string(producer.size()) +
                                " samples, fewer than one batch of " +
                                std::to_string(batch_size));
}

void BatchQueue::fill(std::size_t index, std::span<float> input,
                      std::span<float> label) const {
  const std::size_t in = producer_.input_size(), out = producer_.label_size();
  if (input.size() != batch_ * in || label.size() != batch_ * out)
    throw std::invalid_argument("batch buffers do not match the batch shape");
  const std::size_t first = (index % batches_) * batch_;
  for (std::size_t b = 0; b < batch_; ++b)
    producer_.sample(first + b, input.subspan(b * in, in),
                     label.subspan(b * out, out));
}

} // namespace nnplan
