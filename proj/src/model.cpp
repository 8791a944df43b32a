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


#include "fedproto/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "fedproto/error.hpp"
#include "fedproto/kernels.hpp"

namespace fedproto {

std::string_view to_string(EmbedArch arch) {
  return arch == EmbedArch::kLinear ? "linear" : "mlp1";
}

EmbedArch parse_embed_arch(std::string_view text) {
  if (text == "linear" || text == "linear-embed") return EmbedArch::kLinear;
  if (text == "mlp1" || text == "mlp1-embed") return EmbedArch::kMlp1;
  throw InputError("unknown embedding architecture: " + std::string(text));
}

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::kL2:
      return "l2";
    case Metric::kSquaredL2:
      return "sq-l2";
    case Metric::kL1:
      return "l1";
  }
  return "?";
}

Metric parse_metric(std::string_view text) {
  if (text == "l2") return Metric::kL2;
  if (text == "sq-l2") return Metric::kSquaredL2;
  if (text == "l1") return Metric::kL1;
  throw InputError("unknown metric: " + std::string(text));
}

std::string_view to_string(RegOperand operand) {
  return operand == RegOperand::kClassMean ? "class-mean" : "per-sample";
}

RegOperand parse_reg_operand(std::string_view text) {
  if (text == "class-mean") return RegOperand::kClassMean;
  if (text == "per-sample") return RegOperand::kPerSample;
  throw InputError("unknown reg_operand: " + std::string(text));
}

// ---------------------------------------------------------------------------
// ModelState

ModelState::ModelState(ArchSpec arch, std::vector<ClassId> class_space)
    : arch_(arch), class_space_(std::move(class_space)) {
  if (arch_.input_dim == 0) throw InputError("input_dim must be positive");
  if (arch_.embed_dim == 0) throw InputError("embed_dim must be positive");
  if (arch_.kind == EmbedArch::kMlp1 && arch_.hidden_width == 0) {
    throw InputError("hidden_width must be positive for mlp1");
  }
  if (class_space_.empty()) throw InputError("class_space is empty");
  {
    auto sorted = class_space_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw InputError("class_space has duplicate ids");
    }
  }

  std::size_t offset = 0;
  auto take = [&offset](std::size_t rows, std::size_t cols) {
    Block b{offset, rows, cols};
    offset += rows * cols;
    return b;
  };
  const std::size_t in = arch_.input_dim;
  const std::size_t emb = arch_.embed_dim;
  if (arch_.kind == EmbedArch::kLinear) {
    layout_.w1 = take(emb, in);
    layout_.b1 = take(emb, 1);
    layout_.w2 = Block{offset, 0, 0};
    layout_.b2 = Block{offset, 0, 0};
  } else {
    const std::size_t hid = arch_.hidden_width;
    layout_.w1 = take(hid, in);
    layout_.b1 = take(hid, 1);
    layout_.w2 = take(emb, hid);
    layout_.b2 = take(emb, 1);
  }
  embedding_size_ = offset;
  layout_.v = take(class_space_.size(), emb);
  layout_.c = take(class_space_.size(), 1);
  params_.assign(offset, 0.0);
}

ModelState ModelState::initialized(ArchSpec arch,
                                   std::vector<ClassId> class_space,
                                   std::uint64_t seed) {
  ModelState state(arch, std::move(class_space));
  std::mt19937_64 rng(seed);
  auto fill = [&](const Block& w, const Block& b) {
    if (w.rows == 0) return;
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : state.block(w)) v = dist(rng);
    for (double& v : state.block(b)) v = dist(rng);
  };
  fill(state.layout_.w1, state.layout_.b1);
  fill(state.layout_.w2, state.layout_.b2);
  fill(state.layout_.v, state.layout_.c);
  return state;
}

std::optional<std::size_t> ModelState::class_index(ClassId id) const {
  const auto it = std::find(class_space_.begin(), class_space_.end(), id);
  if (it == class_space_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - class_space_.begin());
}

std::string ModelState::describe_param(std::size_t index) const {
  const std::pair<const char*, const Block*> blocks[] = {
      {arch_.kind == EmbedArch::kLinear ? "embedding.W" : "embedding.W1",
       &layout_.w1},
      {arch_.kind == EmbedArch::kLinear ? "embedding.b" : "embedding.b1",
       &layout_.b1},
      {"embedding.W2", &layout_.w2},
      {"embedding.b2", &layout_.b2},
      {"decision.V", &layout_.v},
      {"decision.c", &layout_.c},
  };
  for (const auto& [name, b] : blocks) {
    const std::size_t n = b->rows * b->cols;
    if (index >= b->offset && index < b->offset + n) {
      const std::size_t local = index - b->offset;
      if (b->cols == 1) return std::string(name) + "[" + std::to_string(local) + "]";
      return std::string(name) + "[" + std::to_string(local / b->cols) + "," +
             std::to_string(local % b->cols) + "]";
    }
  }
  return "param[" + std::to_string(index) + "]";
}

std::size_t parameter_count(const ArchSpec& arch, std::size_t num_classes) {
  std::size_t n = 0;
  if (arch.kind == EmbedArch::kLinear) {
    n += arch.embed_dim * (arch.input_dim + 1);
  } else {
    n += arch.hidden_width * (arch.input_dim + 1);
    n += arch.embed_dim * (arch.hidden_width + 1);
  }
  n += num_classes * (arch.embed_dim + 1);
  return n;
}

// ---------------------------------------------------------------------------
// Forward / backward helpers

namespace {

struct Activations {
  std::vector<double> hidden;     // tanh outputs, mlp1 only
  std::vector<double> embedding;  // h
};

void check_input(const ModelState& state, std::span<const double> x) {
  if (x.size() != state.input_dim()) {
    throw InputError("input has " + std::to_string(x.size()) +
                     " features, model expects " +
                     std::to_string(state.input_dim()));
  }
}

Activations forward_embedding(const ModelState& state,
                              std::span<const double> x) {
  check_input(state, x);
  const auto& L = state.layout();
  Activations act;
  act.embedding.resize(state.embed_dim());
  if (state.arch().kind == EmbedArch::kLinear) {
    kernels::affine(state.block(L.w1), state.block(L.b1), x, act.embedding);
  } else {
    act.hidden.resize(state.arch().hidden_width);
    kernels::affine(state.block(L.w1), state.block(L.b1), x, act.hidden);
    for (double& v : act.hidden) v = std::tanh(v);
    kernels::affine(state.block(L.w2), state.block(L.b2), act.hidden,
                    act.embedding);
  }
  return act;
}

std::vector<double> logits_of(const ModelState& state,
                              std::span<const double> embedding) {
  const auto& L = state.layout();
  std::vector<double> logits(state.class_space().size());
  kernels::affine(state.block(L.v), state.block(L.c), embedding, logits);
  return logits;
}

// Cross-entropy of softmax(logits) at `target`; optionally writes
// softmax - onehot into `dlogits`.
double cross_entropy(std::span<const double> logits, std::size_t target,
                     std::vector<double>* dlogits) {
  const double max = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double z : logits) denom += std::exp(z - max);
  const double log_denom = std::log(denom);
  if (dlogits != nullptr) {
    dlogits->resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
      (*dlogits)[k] = std::exp(logits[k] - max - log_denom);
    }
    (*dlogits)[target] -= 1.0;
  }
  return log_denom - (logits[target] - max);
}

std::size_t label_index(const ModelState& state, ClassId y) {
  const auto idx = state.class_index(y);
  if (!idx) {
    throw InputError("label " + std::to_string(y) +
                     " is outside the model's class space");
  }
  return *idx;
}

// Positions of the batch sorted by Example::index.
std::vector<std::size_t> canonical_order(Batch batch) {
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return batch[a].index < batch[b].index;
  });
  return order;
}

// Gradient of d(a, b) with respect to a, scaled by `scale`, added to `out`.
void accumulate_distance_gradient(std::span<const double> a,
                                  std::span<const double> b, Metric metric,
                                  double scale, std::span<double> out) {
  switch (metric) {
    case Metric::kSquaredL2:
      for (std::size_t k = 0; k < a.size(); ++k) out[k] += scale * 2.0 * (a[k] - b[k]);
      break;
    case Metric::kL2: {
      const double norm = std::sqrt(kernels::squared_distance(a, b));
      if (norm == 0.0) break;  // subgradient 0
      for (std::size_t k = 0; k < a.size(); ++k) out[k] += scale * (a[k] - b[k]) / norm;
      break;
    }
    case Metric::kL1:
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = a[k] - b[k];
        out[k] += scale * static_cast<double>((d > 0.0) - (d < 0.0));
      }
      break;
  }
}

struct ClassMeans {
  std::vector<ClassId> ids;               // ascending
  std::vector<std::vector<double>> sums;  // then means
  std::vector<std::uint64_t> counts;
};

ClassMeans class_means(const std::vector<Activations>& acts, Batch batch,
                       const std::vector<std::size_t>& order,
                       std::size_t embed_dim) {
  ClassMeans m;
  std::map<ClassId, std::size_t> slot;
  for (std::size_t pos : order) slot.emplace(batch[pos].y, 0);
  for (auto& [id, s] : slot) {
    s = m.ids.size();
    m.ids.push_back(id);
  }
  m.sums.assign(m.ids.size(), std::vector<double>(embed_dim, 0.0));
  m.counts.assign(m.ids.size(), 0);
  for (std::size_t pos : order) {
    const std::size_t s = slot[batch[pos].y];
    kernels::axpy(1.0, acts[pos].embedding, m.sums[s]);
    ++m.counts[s];
  }
  for (std::size_t s = 0; s < m.ids.size(); ++s) {
    const double inv = 1.0 / static_cast<double>(m.counts[s]);
    for (double& v : m.sums[s]) v *= inv;
  }
  return m;
}

const Prototype& require_global(const PrototypeSet& global, ClassId id) {
  const Prototype* p = global.find(id);
  if (p == nullptr) {
    throw ProtocolError("class " + std::to_string(id) +
                        " has a local prototype but no global prototype; "
                        "download must precede update");
  }
  return *p;
}

// Backpropagates dh through the embedding network for one sample.
void backprop_embedding(const ModelState& state, std::span<const double> x,
                        const Activations& act, std::span<const double> dh,
                        std::span<double> grad) {
  const auto& L = state.layout();
  auto gblock = [&](const ModelState::Block& b) {
    return grad.subspan(b.offset, b.rows * b.cols);
  };
  if (state.arch().kind == EmbedArch::kLinear) {
    kernels::rank1_update(gblock(L.w1), 1.0, dh, x);
    kernels::axpy(1.0, dh, gblock(L.b1));
    return;
  }
  kernels::rank1_update(gblock(L.w2), 1.0, dh, act.hidden);
  kernels::axpy(1.0, dh, gblock(L.b2));
  std::vector<double> da(act.hidden.size(), 0.0);
  kernels::affine_transpose_accumulate(state.block(L.w2), dh, da);
  for (std::size_t k = 0; k < da.size(); ++k) {
    da[k] *= 1.0 - act.hidden[k] * act.hidden[k];
  }
  kernels::rank1_update(gblock(L.w1), 1.0, da, x);
  kernels::axpy(1.0, da, gblock(L.b1));
}

void require_nonempty(Batch batch, const char* what) {
  if (batch.empty()) throw InputError(std::string(what) + ": batch is empty");
}

bool regularizer_active(const PrototypeSet& global,
                        const RegularizerConfig& reg) {
  if (reg.lambda < 0.0 || !std::isfinite(reg.lambda)) {
    throw InputError("lambda must be finite and non-negative");
  }
  // Bootstrap: nothing to regularize against yet.
  return !(reg.lambda == 0.0 && global.empty());
}

}  // namespace

// ---------------------------------------------------------------------------
// Public operations

std::vector<double> embed(const ModelState& state, std::span<const double> x) {
  return forward_embedding(state, x).embedding;
}

std::vector<double> decision_scores(const ModelState& state,
                                    std::span<const double> x) {
  return logits_of(state, forward_embedding(state, x).embedding);
}

double supervised_loss(const ModelState& state, Batch batch) {
  require_nonempty(batch, "supervised_loss");
  double sum = 0.0;
  for (std::size_t pos : canonical_order(batch)) {
    const std::size_t target = label_index(state, batch[pos].y);
    const auto act = forward_embedding(state, batch[pos].x);
    sum += cross_entropy(logits_of(state, act.embedding), target, nullptr);
  }
  return sum / static_cast<double>(batch.size());
}

PrototypeSet compute_local_prototypes(const ModelState& state, Batch batch) {
  require_nonempty(batch, "compute_local_prototypes");
  const auto order = canonical_order(batch);
  std::vector<Activations> acts(batch.size());
  for (std::size_t pos : order) acts[pos] = forward_embedding(state, batch[pos].x);
  ClassMeans means = class_means(acts, batch, order, state.embed_dim());
  PrototypeSet out(state.embed_dim());
  for (std::size_t s = 0; s < means.ids.size(); ++s) {
    out.insert(means.ids[s], std::move(means.sums[s]), means.counts[s]);
  }
  return out;
}

double distance(std::span<const double> a, std::span<const double> b,
                Metric metric) {
  if (a.size() != b.size()) throw InputError("distance: dimension mismatch");
  switch (metric) {
    case Metric::kSquaredL2:
      return kernels::squared_distance(a, b);
    case Metric::kL2:
      return std::sqrt(kernels::squared_distance(a, b));
    case Metric::kL1: {
      double sum = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) sum += std::abs(a[k] - b[k]);
      return sum;
    }
  }
  return 0.0;
}

double regularizer(const PrototypeSet& local, const PrototypeSet& global,
                   Metric metric) {
  double sum = 0.0;
  for (const auto& [id, proto] : local) {
    sum += distance(proto.vector, require_global(global, id).vector, metric);
  }
  return sum;
}

double per_sample_regularizer(const ModelState& state, Batch batch,
                              const PrototypeSet& global, Metric metric) {
  require_nonempty(batch, "per_sample_regularizer");
  double sum = 0.0;
  for (std::size_t pos : canonical_order(batch)) {
    const auto h = embed(state, batch[pos].x);
    sum += distance(h, require_global(global, batch[pos].y).vector, metric);
  }
  return sum / static_cast<double>(batch.size());
}

LossParts local_loss(const ModelState& state, Batch batch,
                     const PrototypeSet& global, const RegularizerConfig& reg) {
  LossParts parts;
  parts.supervised = supervised_loss(state, batch);
  if (regularizer_active(global, reg)) {
    parts.regularizer =
        reg.operand == RegOperand::kClassMean
            ? regularizer(compute_local_prototypes(state, batch), global, reg.metric)
            : per_sample_regularizer(state, batch, global, reg.metric);
  }
  parts.total = parts.supervised + reg.lambda * parts.regularizer;
  return parts;
}

LossAndGradient evaluate_loss_and_gradient(const ModelState& state, Batch batch,
                                           const PrototypeSet& global,
                                           const RegularizerConfig& reg) {
  require_nonempty(batch, "local_loss_gradient");
  const bool use_reg = regularizer_active(global, reg);
  const auto order = canonical_order(batch);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const std::size_t emb = state.embed_dim();
  const auto& L = state.layout();

  std::vector<Activations> acts(batch.size());
  std::vector<std::size_t> targets(batch.size());
  for (std::size_t pos : order) {
    targets[pos] = label_index(state, batch[pos].y);
    acts[pos] = forward_embedding(state, batch[pos].x);
  }

  LossAndGradient out;
  std::vector<double>& grad = out.gradient.values;
  grad.assign(state.num_params(), 0.0);

  // Prototype-regularizer contribution to each sample's dL/dh.
  std::vector<std::vector<double>> dh_reg(batch.size());
  if (use_reg) {
    if (reg.operand == RegOperand::kClassMean) {
      const ClassMeans means = class_means(acts, batch, order, emb);
      std::map<ClassId, std::vector<double>> dmean;
      for (std::size_t s = 0; s < means.ids.size(); ++s) {
        const auto& target = require_global(global, means.ids[s]).vector;
        out.loss.regularizer += distance(means.sums[s], target, reg.metric);
        std::vector<double> d(emb, 0.0);
        // The mean hands 1/|D_j| of its gradient to every member.
        accumulate_distance_gradient(
            means.sums[s], target, reg.metric,
            reg.lambda / static_cast<double>(means.counts[s]), d);
        dmean.emplace(means.ids[s], std::move(d));
      }
      for (std::size_t pos : order) dh_reg[pos] = dmean.at(batch[pos].y);
    } else {
      for (std::size_t pos : order) {
        const auto& target = require_global(global, batch[pos].y).vector;
        out.loss.regularizer += distance(acts[pos].embedding, target, reg.metric);
        dh_reg[pos].assign(emb, 0.0);
        accumulate_distance_gradient(acts[pos].embedding, target, reg.metric,
                                     reg.lambda * inv_batch, dh_reg[pos]);
      }
      out.loss.regularizer *= inv_batch;
    }
  }

  auto gblock = [&](const ModelState::Block& b) {
    return std::span<double>(grad).subspan(b.offset, b.rows * b.cols);
  };
  std::vector<double> dlogits;
  std::vector<double> dh(emb);
  for (std::size_t pos : order) {
    const Activations& act = acts[pos];
    const auto logits = logits_of(state, act.embedding);
    out.loss.supervised += cross_entropy(logits, targets[pos], &dlogits);
    for (double& v : dlogits) v *= inv_batch;

    kernels::rank1_update(gblock(L.v), 1.0, dlogits, act.embedding);
    kernels::axpy(1.0, dlogits, gblock(L.c));

    if (use_reg) {
      std::copy(dh_reg[pos].begin(), dh_reg[pos].end(), dh.begin());
    } else {
      std::fill(dh.begin(), dh.end(), 0.0);
    }
    kernels::affine_transpose_accumulate(state.block(L.v), dlogits, dh);
    backprop_embedding(state, batch[pos].x, act, dh, grad);
  }
  out.loss.supervised *= inv_batch;
  out.loss.total = out.loss.supervised + reg.lambda * out.loss.regularizer;

  double sq = 0.0;
  for (std::size_t k = 0; k < grad.size(); ++k) {
    if (!std::isfinite(grad[k])) {
      throw NumericError("non-finite gradient at " + state.describe_param(k));
    }
    sq += grad[k] * grad[k];
  }
  if (!std::isfinite(out.loss.total)) throw NumericError("non-finite loss");
  out.gradient.l2_norm = std::sqrt(sq);
  return out;
}

Gradient local_loss_gradient(const ModelState& state, Batch batch,
                             const PrototypeSet& global,
                             const RegularizerConfig& reg) {
  return evaluate_loss_and_gradient(state, batch, global, reg).gradient;
}

std::vector<double> mean_embedding(const ModelState& state, Batch batch) {
  require_nonempty(batch, "mean_embedding");
  std::vector<double> sum(state.embed_dim(), 0.0);
  for (std::size_t pos : canonical_order(batch)) {
    kernels::axpy(1.0, forward_embedding(state, batch[pos].x).embedding, sum);
  }
  for (double& v : sum) v /= static_cast<double>(batch.size());
  return sum;
}

std::vector<double> mean_embedding_vjp(const ModelState& state, Batch batch,
                                       std::span<const double> u) {
  require_nonempty(batch, "mean_embedding_vjp");
  if (u.size() != state.embed_dim()) throw InputError("vjp: bad cotangent size");
  std::vector<double> grad(state.num_params(), 0.0);
  std::vector<double> dh(u.begin(), u.end());
  for (double& v : dh) v /= static_cast<double>(batch.size());
  for (std::size_t pos : canonical_order(batch)) {
    const auto act = forward_embedding(state, batch[pos].x);
    backprop_embedding(state, batch[pos].x, act, dh, grad);
  }
  grad.resize(state.num_embedding_params());
  return grad;
}

ClassId predict_by_prototype(const ModelState& state, std::span<const double> x,
                             const PrototypeSet& protos) {
  if (protos.empty()) throw InputError("predict_by_prototype: no prototypes");
  const auto h = embed(state, x);
  if (protos.dim() != h.size()) {
    throw InputError("prototype dimension does not match embed_dim");
  }
  ClassId best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  // Ascending class order plus strict '<' keeps the smallest id on ties.
  for (const auto& [id, proto] : protos) {
    const double d = kernels::squared_distance(h, proto.vector);
    if (d < best_dist) {
      best_dist = d;
      best = id;
    }
  }
  return best;
}

ClassId predict_by_decision(const ModelState& state, std::span<const double> x) {
  const auto scores = decision_scores(state, x);
  const auto& classes = state.class_space();
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k) {
    if (scores[k] > scores[best] ||
        (scores[k] == scores[best] && classes[k] < classes[best])) {
      best = k;
    }
  }
  return classes[best];
}

}  // namespace fedproto
