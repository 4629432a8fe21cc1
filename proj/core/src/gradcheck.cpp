// SPDX-License-Identifier: Apache-2.0
#include "fans/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

#include "fans/errors.hpp"
#include "fans/layers.hpp"
#include "fans/model.hpp"
#include "fans/rng.hpp"
#include "fans/training.hpp"

namespace fans {

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& x : t.values()) x = scale * rng.uniform(-1.0, 1.0);
  return t;
}

Tensor<double> param_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  auto t = random_tensor(std::move(shape), rng, scale);
  t.set_requires_grad(true);
  return t;
}

/// Projects an arbitrary output onto a scalar with fixed random weights.
Var<double> probe(Graph<double>& g, Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  auto w = random_tensor(out.shape(), rng);
  return ops::sum(ops::mul(out, g.constant(std::move(w))));
}

template <typename P>
std::vector<Tensor<double>*> tensors_of(P& params) {
  std::vector<Tensor<double>*> out;
  params.visit("", [&](const std::string&, Tensor<double>& t) { out.push_back(&t); });
  return out;
}

template <typename P>
void perturb_all(P& params, Rng& rng, double scale) {
  // initialisation leaves biases at zero, which hides their gradient paths
  params.visit("", [&](const std::string&, Tensor<double>& t) {
    for (auto& x : t.values()) x = scale * rng.uniform(-1.0, 1.0);
  });
}

struct Case {
  std::vector<Tensor<double>*> params;
  LossBuilder loss;
  std::shared_ptr<void> keep;  // owns the tensors referenced above
};

template <typename State>
Case make_case(std::shared_ptr<State> s, std::vector<Tensor<double>*> params, LossBuilder loss) {
  return Case{std::move(params), std::move(loss), std::static_pointer_cast<void>(s)};
}

ModelConfig tiny_config(Variant v) {
  ModelConfig c = ModelConfig::preset(v, ModelConfig::Scale::small);
  c.input_dim = 6;
  c.enc_layers = 1;
  c.enc_width = 5;
  c.d_model = 4;
  c.heads = 2;
  c.head_dim = 3;
  c.d_ff = 6;
  c.dec_width = 5;
  c.additive_dim = 4;
  c.value_dec_layers = c.tag_dec_layers = 1;
  c.serial_dec_layers = 1;
  if (v == Variant::fans_c) c.enc_layers = 1;
  c.num_words = 5;
  c.num_intents = 2;
  c.num_tags = 3;
  c.dropout = 0.0;
  c.label_smoothing = 0.1;
  return c;
}

Case full_loss_case(Variant v, std::uint64_t seed) {
  struct State {
    Model<double> model;
    std::vector<Example<double>> batch;
  };
  auto s = std::make_shared<State>();
  const ModelConfig c = tiny_config(v);
  s->model = v == Variant::serialized_direct ? build_serialized_baseline<double>(c, seed) : build<double>(c, seed);
  Rng rng(seed + 1);
  for (auto& p : s->model.named_parameters())
    for (auto& x : p.tensor->values()) x = 0.5 * rng.uniform(-1.0, 1.0) + (p.name.find("gain") != std::string::npos ? 1.0 : 0.0);
  const std::size_t intent0 = c.first_intent_id(), tag0 = c.first_tag_id();
  const bool serial = v == Variant::serialized_direct;
  const std::size_t word0 = serial ? c.first_serialized_word_id() : kNumReserved;
  auto example = [&](std::size_t frames, std::vector<std::size_t> tags, std::vector<std::size_t> values) {
    Example<double> ex;
    ex.features = random_tensor({frames, c.input_dim}, rng);
    ex.target.tag.push_back(intent0 + tags.size() % c.num_intents);
    for (std::size_t i = 0; i < tags.size(); ++i) {
      ex.target.tag.push_back(tag0 + tags[i]);
      if (serial) {
        ex.target.tag.push_back(word0 + values[i]);
      } else {
        ex.target.value.push_back(word0 + values[i]);
      }
    }
    return ex;
  };
  s->batch.push_back(example(4, {0, 2}, {1, 4}));
  s->batch.push_back(example(3, {1}, {3}));
  std::vector<Tensor<double>*> params;
  for (auto& p : s->model.named_parameters()) params.push_back(p.tensor);
  State* st = s.get();
  return make_case(s, params, [st](Graph<double>& g) {
    auto tf = forward_teacher_forced<double>(g, st->model, st->batch);
    return compute_loss(tf, LossWeights{1.0, 1.0, 0.1}).total;
  });
}

Case component_case(const std::string& name, std::uint64_t seed) {
  Rng rng(seed);
  if (name == "matmul") {
    struct S { Tensor<double> a, b; };
    auto s = std::make_shared<S>(S{param_tensor({3, 4}, rng), param_tensor({4, 5}, rng)});
    S* p = s.get();
    return make_case(s, {&p->a, &p->b}, [p](Graph<double>& g) {
      return probe(g, ops::matmul(g.param(p->a), g.param(p->b)), 11);
    });
  }
  if (name == "softmax") {
    struct S { Tensor<double> x; };
    auto s = std::make_shared<S>(S{param_tensor({3, 5}, rng, 2.0)});
    S* p = s.get();
    return make_case(s, {&p->x}, [p](Graph<double>& g) {
      auto x = g.param(p->x);
      return ops::add(probe(g, ops::softmax(x, 1), 12), probe(g, ops::softmax(x, 0), 13));
    });
  }
  if (name == "layer_norm") {
    struct S { Tensor<double> x, gain, bias; };
    auto s = std::make_shared<S>(S{param_tensor({3, 6}, rng), param_tensor({6}, rng), param_tensor({6}, rng)});
    S* p = s.get();
    return make_case(s, {&p->x, &p->gain, &p->bias}, [p](Graph<double>& g) {
      return probe(g, ops::layer_norm(g.param(p->x), g.param(p->gain), g.param(p->bias)), 14);
    });
  }
  if (name == "cross_entropy") {
    struct S { Tensor<double> logits; };
    auto s = std::make_shared<S>(S{param_tensor({4, 6}, rng, 2.0)});
    S* p = s.get();
    return make_case(s, {&p->logits}, [p](Graph<double>& g) {
      const std::vector<std::size_t> gold{0, 5, 2, 2};
      const std::vector<double> weight{0.25, 0.5, 0.0, 1.0};
      return ops::cross_entropy_rows<double>(g.param(p->logits), gold, weight, 0.1);
    });
  }
  if (name == "embedding") {
    struct S { Embedding<double> e; };
    auto s = std::make_shared<S>(S{Embedding<double>::make(7, 4)});
    s->e.init(rng);
    S* p = s.get();
    return make_case(s, tensors_of(p->e), [p](Graph<double>& g) {
      const std::vector<std::size_t> ids{1, 3, 3, 6};
      return probe(g, p->e.lookup(g, ids), 15);
    });
  }
  if (name == "lstm") {
    struct S { LstmParams<double> lstm; Tensor<double> x; };
    auto s = std::make_shared<S>(S{LstmParams<double>::make(3, 4, 2), param_tensor({5, 3}, rng)});
    perturb_all(s->lstm, rng, 0.6);
    S* p = s.get();
    auto params = tensors_of(p->lstm);
    params.push_back(&p->x);
    return make_case(s, params, [p](Graph<double>& g) {
      auto r = lstm_forward<double>(g, p->lstm, g.param(p->x));
      return ops::add(probe(g, r.outputs, 16), probe(g, r.state.c.back(), 17));
    });
  }
  if (name == "mha_self" || name == "mha_cross") {
    const bool self = name == "mha_self";
    struct S { MhaParams<double> mha; Tensor<double> q, kv; };
    auto s = std::make_shared<S>(S{MhaParams<double>::make(4, self ? 4 : 6, 4, 2, 3), param_tensor({self ? 4u : 3u, 4}, rng),
                                   param_tensor({5, 6}, rng)});
    perturb_all(s->mha, rng, 0.8);
    S* p = s.get();
    auto params = tensors_of(p->mha);
    params.push_back(&p->q);
    if (!self) params.push_back(&p->kv);
    return make_case(s, params, [p, self](Graph<double>& g) {
      auto q = g.param(p->q);
      if (self) {
        const Mask causal = Mask::causal(4);
        return probe(g, mha<double>(g, p->mha, q, q, q, &causal), 18);
      }
      auto kv = g.param(p->kv);
      return probe(g, mha<double>(g, p->mha, q, kv, kv), 19);
    });
  }
  if (name == "additive_attend") {
    struct S { AdditiveParams<double> att; Tensor<double> state, enc; };
    auto s = std::make_shared<S>(S{AdditiveParams<double>::make(4, 3, 5), param_tensor({1, 4}, rng), param_tensor({5, 3}, rng)});
    perturb_all(s->att, rng, 0.8);
    S* p = s.get();
    auto params = tensors_of(p->att);
    params.push_back(&p->state);
    params.push_back(&p->enc);
    return make_case(s, params, [p](Graph<double>& g) {
      return probe(g, additive_attend<double>(g, p->att, g.param(p->state), g.param(p->enc)), 20);
    });
  }
  if (name == "ffn") {
    struct S { FfnParams<double> f; Tensor<double> x; };
    auto s = std::make_shared<S>(S{FfnParams<double>::make(4, 6), param_tensor({3, 4}, rng)});
    perturb_all(s->f, rng, 0.8);
    S* p = s.get();
    auto params = tensors_of(p->f);
    params.push_back(&p->x);
    return make_case(s, params, [p](Graph<double>& g) { return probe(g, ffn<double>(g, p->f, g.param(p->x)), 21); });
  }
  if (name == "loss_fans_a") return full_loss_case(Variant::fans_a, seed);
  if (name == "loss_fans_b") return full_loss_case(Variant::fans_b, seed);
  if (name == "loss_fans_c") return full_loss_case(Variant::fans_c, seed);
  if (name == "loss_serialized") return full_loss_case(Variant::serialized_direct, seed);
  throw ContractError("gradcheck: unknown component '" + name + "'");
}

double eval_loss(const LossBuilder& loss) {
  Graph<double> g;
  g.set_grad_enabled(false);
  return loss(g).values()[0];
}

}  // namespace

GradcheckRow check_gradients(const std::string& name, const std::vector<Tensor<double>*>& params,
                             const LossBuilder& loss, const GradcheckOptions& opts) {
  for (auto* p : params) p->clear_grad();
  {
    Graph<double> g;
    g.backward(loss(g));
  }
  GradcheckRow row;
  row.component = name;
  Rng rng(opts.seed);
  for (auto* p : params) {
    if (!p->has_grad()) p->zero_grad();  // unreached tensor: analytic gradient is zero
    const std::vector<double> analytic(std::as_const(*p).grad().begin(), std::as_const(*p).grad().end());
    std::vector<std::size_t> idx(p->size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opts.samples) {
      rng.shuffle(std::span<std::size_t>(idx));
      idx.resize(opts.samples);
    }
    for (auto i : idx) {
      const double saved = p->values()[i];
      p->values()[i] = saved + opts.step;
      const double up = eval_loss(loss);
      p->values()[i] = saved - opts.step;
      const double down = eval_loss(loss);
      p->values()[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opts.floor});
      row.max_rel_error = std::max(row.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++row.checked;
    }
    p->clear_grad();
  }
  row.passed = row.checked > 0 && row.max_rel_error < opts.tolerance;
  return row;
}

std::vector<std::string> gradcheck_components() {
  return {"matmul",   "softmax",         "layer_norm", "cross_entropy", "embedding",   "lstm",        "mha_self",
          "mha_cross", "additive_attend", "ffn",        "loss_fans_a",   "loss_fans_b", "loss_fans_c", "loss_serialized"};
}

GradcheckRow run_gradcheck_component(const std::string& name, const GradcheckOptions& opts) {
  Case c = component_case(name, opts.seed);
  return check_gradients(name, c.params, c.loss, opts);
}

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opts) {
  std::vector<GradcheckRow> rows;
  for (const auto& name : gradcheck_components()) rows.push_back(run_gradcheck_component(name, opts));
  return rows;
}

std::string format_gradcheck(const std::vector<GradcheckRow>& rows, double tolerance) {
  std::string out;
  char buf[160];
  std::size_t failed = 0;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s max_rel_err=%.3e checked=%-5zu %s\n", r.component.c_str(), r.max_rel_error,
                  r.checked, r.passed ? "PASS" : "FAIL");
    out += buf;
    failed += r.passed ? 0 : 1;
  }
  std::snprintf(buf, sizeof buf, "%zu/%zu components within %.0e\n", rows.size() - failed, rows.size(), tolerance);
  out += buf;
  return out;
}

}  // namespace fans
