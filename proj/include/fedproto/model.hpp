// Copyright 2026 The fedproto Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================


#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedproto/prototype.hpp"

namespace fedproto {

// Embedding network variants. Both map R^input_dim to the shared
// R^embed_dim prototype space; the decision head is always affine.
enum class EmbedArch {
  kLinear,  // h = W x + b
  kMlp1,    // h = W2 tanh(W1 x + b1) + b2
};

std::string_view to_string(EmbedArch arch);
EmbedArch parse_embed_arch(std::string_view text);

struct ArchSpec {
  EmbedArch kind = EmbedArch::kMlp1;
  std::size_t input_dim = 0;
  std::size_t embed_dim = 50;
  std::size_t hidden_width = 64;  // kMlp1 only

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

// Distance used by the prototype regularizer.
enum class Metric { kL2, kSquaredL2, kL1 };
std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view text);

// Whether the regularizer compares batch class means against the global
// prototypes, or every sample's embedding against its class's prototype.
enum class RegOperand { kClassMean, kPerSample };
std::string_view to_string(RegOperand operand);
RegOperand parse_reg_operand(std::string_view text);

// One client's parameters: embedding part followed by decision part, stored
// contiguously so optimizers and FedAvg can treat them as one vector.
//
// Layout, all matrices row-major:
//   linear: W[embed x input] b[embed] | V[classes x embed] c[classes]
//   mlp1:   W1[hidden x input] b1[hidden] W2[embed x hidden] b2[embed] | V c
class ModelState {
 public:
  // All-zero parameters.
  ModelState(ArchSpec arch, std::vector<ClassId> class_space);

  // PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
  static ModelState initialized(ArchSpec arch, std::vector<ClassId> class_space,
                                std::uint64_t seed);

  const ArchSpec& arch() const { return arch_; }
  std::size_t input_dim() const { return arch_.input_dim; }
  std::size_t embed_dim() const { return arch_.embed_dim; }
  const std::vector<ClassId>& class_space() const { return class_space_; }
  std::optional<std::size_t> class_index(ClassId id) const;

  std::size_t num_params() const { return params_.size(); }
  std::size_t num_embedding_params() const { return embedding_size_; }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::span<const double> embedding_params() const {
    return std::span<const double>(params_).first(embedding_size_);
  }
  std::span<const double> decision_params() const {
    return std::span<const double>(params_).subspan(embedding_size_);
  }

  // Named parameter blocks. For kLinear the "first layer" blocks are W and b
  // and the second-layer accessors return empty spans.
  struct Block {
    std::size_t offset;
    std::size_t rows;
    std::size_t cols;  // 1 for bias vectors
    friend bool operator==(const Block&, const Block&) = default;
  };
  struct Layout {
    Block w1, b1, w2, b2, v, c;
    friend bool operator==(const Layout&, const Layout&) = default;
  };
  const Layout& layout() const { return layout_; }
  std::span<const double> block(const Block& b) const {
    return std::span<const double>(params_).subspan(b.offset, b.rows * b.cols);
  }
  std::span<double> block(const Block& b) {
    return std::span<double>(params_).subspan(b.offset, b.rows * b.cols);
  }

  // "decision.V[3]"-style name for a flat parameter index.
  std::string describe_param(std::size_t index) const;

  friend bool operator==(const ModelState&, const ModelState&) = default;

 private:
  ArchSpec arch_;
  std::vector<ClassId> class_space_;
  Layout layout_{};
  std::size_t embedding_size_ = 0;
  std::vector<double> params_;
};

// Number of scalars a model of this shape carries.
std::size_t parameter_count(const ArchSpec& arch, std::size_t num_classes);

struct Example {
  std::span<const double> x;
  ClassId y = 0;
  // Position in the owning dataset. Batch reductions run in ascending index
  // order so results do not depend on how the caller ordered the batch.
  std::size_t index = 0;
};
using Batch = std::span<const Example>;

// Flat gradient with the same layout as ModelState::params().
struct Gradient {
  std::vector<double> values;
  double l2_norm = 0.0;
};

struct RegularizerConfig {
  double lambda = 1.0;
  Metric metric = Metric::kSquaredL2;
  RegOperand operand = RegOperand::kClassMean;
};

struct LossParts {
  double supervised = 0.0;
  double regularizer = 0.0;
  double total = 0.0;  // supervised + lambda * regularizer
};

std::vector<double> embed(const ModelState& state, std::span<const double> x);
// Decision-head scores g(f(x)), one per entry of class_space.
std::vector<double> decision_scores(const ModelState& state,
                                    std::span<const double> x);

// Mean softmax cross-entropy of the decision head over the batch.
double supervised_loss(const ModelState& state, Batch batch);

// Mean embedding per class present in the batch.
PrototypeSet compute_local_prototypes(const ModelState& state, Batch batch);

// Distance d(a, b) for one pair of vectors.
double distance(std::span<const double> a, std::span<const double> b,
                Metric metric);

// Sum over classes of `local` of d(local_j, global_j). A class in `local`
// but missing from `global` is a ProtocolError.
double regularizer(const PrototypeSet& local, const PrototypeSet& global,
                   Metric metric);

// Mean over samples of d(f(x), global_y).
double per_sample_regularizer(const ModelState& state, Batch batch,
                              const PrototypeSet& global, Metric metric);

// Supervised loss plus lambda times the prototype regularizer. With
// lambda == 0 and an empty global set the regularizer is reported as 0
// (bootstrap round, nothing to compare against).
LossParts local_loss(const ModelState& state, Batch batch,
                     const PrototypeSet& global, const RegularizerConfig& reg);

struct LossAndGradient {
  LossParts loss;
  Gradient gradient;
};

// Loss and its exact gradient in one forward/backward pass. Throws
// NumericError naming the parameter if any gradient entry is non-finite.
LossAndGradient evaluate_loss_and_gradient(const ModelState& state, Batch batch,
                                           const PrototypeSet& global,
                                           const RegularizerConfig& reg);

Gradient local_loss_gradient(const ModelState& state, Batch batch,
                             const PrototypeSet& global,
                             const RegularizerConfig& reg);

// Gradient w.r.t. the embedding parameters of u . mean_x f(phi; x).
// Returned vector has num_embedding_params() entries.
std::vector<double> mean_embedding_vjp(const ModelState& state, Batch batch,
                                       std::span<const double> u);
// mean_x f(phi; x) over the batch.
std::vector<double> mean_embedding(const ModelState& state, Batch batch);

// Nearest prototype by Euclidean distance; ties go to the smallest class id.
ClassId predict_by_prototype(const ModelState& state, std::span<const double> x,
                             const PrototypeSet& protos);
// Decision-head argmax; ties go to the smallest class id.
ClassId predict_by_decision(const ModelState& state, std::span<const double> x);

}  // namespace fedproto
