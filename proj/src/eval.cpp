#include "dvd/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "dvd/losses.hpp"
#include "dvd/ops.hpp"
#include "dvd/training.hpp"

namespace dvd {

namespace {

constexpr const char* kCeName = "apgd-ce";
constexpr const char* kDlrName = "apgd-dlr";
constexpr const char* kInstrName = "apgd-instr";
constexpr const char* kTargetedName = "apgd-targeted";

std::string fill(const std::string& tmpl, const std::string& cls) {
  const auto at = tmpl.find("{class}");
  if (at == std::string::npos) throw EvalError("prompt template lacks {class}: '" + tmpl + "'");
  return tmpl.substr(0, at) + cls + tmpl.substr(at + 7);
}

Tensor with_delta(const Tensor& x, const Tensor& delta) {
  auto xv = x.data();
  auto dv = delta.data();
  std::vector<double> out(xv.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = xv[j] + dv[j];
  return Tensor(x.shape(), std::move(out));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.size(0), k = logits.size(1);
  auto v = logits.data();
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (v[i * k + j] > v[i * k + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const DualEncoder& model, const ZeroShotHead& head, const Tensor& images) {
  NoGradGuard guard;
  return classify(head, encode_image(model, images)).labels;
}

TokenSeq strip_eos(TokenSeq t) {
  auto it = std::find(t.begin(), t.end(), kEos);
  t.erase(it, t.end());
  return t;
}

template <typename Fn>
void for_batches(std::size_t n, std::size_t batch, Fn&& fn) {
  if (batch == 0) throw EvalError("batch size must be positive");
  for (std::size_t lo = 0; lo < n; lo += batch) fn(lo, std::min(n, lo + batch));
}

}  // namespace

std::vector<std::string> default_prompt_templates() { return {"a photo of a {class}", "an image of a {class}"}; }

std::vector<std::string> default_class_names() {
  std::vector<std::string> out;
  for (int k = 0; k < kNumClasses; ++k) out.push_back(class_name(k));
  return out;
}

ZeroShotHead build_zero_shot_head(const DualEncoder& model, const std::vector<std::string>& classes,
                                  const std::vector<std::string>& templates) {
  if (templates.empty()) throw EvalError("build_zero_shot_head: at least one template is required");
  if (classes.empty()) throw EvalError("build_zero_shot_head: no classes");
  NoGradGuard guard;
  const std::size_t k = classes.size();
  std::vector<double> acc;
  for (const auto& tmpl : templates) {
    std::vector<TokenSeq> prompts;
    std::size_t len = 0;
    for (const auto& cls : classes) {
      TokenSeq ids;
      try {
        ids = tokenize(fill(tmpl, cls));
      } catch (const VocabError& e) {
        throw EvalError("build_zero_shot_head: class '" + cls + "' is not expressible: " + e.what());
      }
      ids.push_back(kEos);
      len = std::max(len, ids.size());
      prompts.push_back(std::move(ids));
    }
    std::vector<int> flat(k * len, kPad);
    for (std::size_t i = 0; i < k; ++i) std::copy(prompts[i].begin(), prompts[i].end(), flat.begin() + i * len);
    const Tensor out = encode_text(model, flat, len);
    auto emb = out.data();
    if (acc.empty()) acc.assign(emb.size(), 0.0);
    for (std::size_t j = 0; j < emb.size(); ++j) acc[j] += emb[j];
  }
  const std::size_t d = acc.size() / k;
  for (auto& v : acc) v /= static_cast<double>(templates.size());
  ZeroShotHead head{classes, templates, l2_normalize(Tensor(Shape{k, d}, std::move(acc)), 1).detach()};
  return head;
}

Classification classify(const ZeroShotHead& head, const Tensor& image_embeddings) {
  if (image_embeddings.dim() != 2 || image_embeddings.size(1) != head.weights.size(1)) {
    throw EvalError("classify: image embeddings must be [B, " + std::to_string(head.weights.size(1)) + "]");
  }
  NoGradGuard guard;
  Classification out;
  out.logits = matmul(image_embeddings, transpose(head.weights)).detach();
  out.labels = argmax_rows(out.logits);
  return out;
}

Tensor zero_shot_logits(const DualEncoder& model, const ZeroShotHead& head, const Tensor& images) {
  double inv_tau;
  {
    NoGradGuard guard;
    inv_tau = inverse_temperature(model).item();
  }
  return scale(matmul(encode_image(model, images), transpose(head.weights)), inv_tau);
}

std::vector<std::size_t> eval_subset(const Dataset& data, std::size_t count, std::uint64_t seed) {
  auto idx = data.indices(Split::Val);
  if (count > idx.size()) {
    throw EvalError("eval subset of " + std::to_string(count) + " exceeds the " + std::to_string(idx.size()) +
                    " validation samples");
  }
  Rng rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  idx.resize(count);
  return idx;
}

RobustEval eval_robust_accuracy(const DualEncoder& model, const ZeroShotHead& head, const Dataset& data,
                                const RobustEvalOptions& opts) {
  if (!opts.use_ce && !opts.use_dlr) throw EvalError("eval_robust_accuracy: no attack stage selected");
  RobustEval out;
  out.indices = eval_subset(data, opts.samples, opts.seed);
  if (opts.use_ce) out.stage_names.emplace_back(kCeName);
  if (opts.use_dlr) out.stage_names.emplace_back(kDlrName);
  const std::size_t n = out.indices.size();
  const std::size_t k = head.num_classes();
  const std::size_t n_stages = out.stage_names.size();

  std::vector<bool> correct(n, false);
  std::vector<int> broken_at(n, -1);  // stage that flipped a correct sample
  PerturbationBudget budget;
  budget.eps = opts.eps;
  budget.steps = opts.steps;
  budget.init = Init::RandomUniform;
  budget.validate();

  std::size_t batch_no = 0;
  for_batches(n, opts.batch_size, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> idx(out.indices.begin() + lo, out.indices.begin() + hi);
    auto x = data.image_batch(idx);
    auto pred = predict(model, head, x);
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      correct[lo + j] = pred[j] == data.labels[idx[j]];
      if (correct[lo + j]) keep.push_back(j);
    }
    const std::uint64_t batch_seed = Rng::derive(opts.seed, 1000 + batch_no++);
    if (keep.empty()) return;
    std::vector<int> labels;
    for (auto j : keep) labels.push_back(data.labels[idx[j]]);
    auto xk = data.image_batch([&] {
      std::vector<std::size_t> sel;
      for (auto j : keep) sel.push_back(idx[j]);
      return sel;
    }());
    auto rows_labels = [&](std::span<const std::size_t> rows) {
      std::vector<int> l;
      for (auto r : rows) l.push_back(labels[r]);
      return l;
    };

    std::vector<AttackStage> stages;
    std::size_t stage_no = 0;
    auto add_stage = [&](const char* name, bool dlr) {
      const std::uint64_t s = Rng::derive(batch_seed, stage_no++);
      stages.push_back({name, [&, dlr, s](const Tensor& xs, std::span<const std::size_t> rows) {
                          auto l = rows_labels(rows);
                          auto obj = make_objective([&](const Tensor& xa) -> Tensor {
                            auto logits = zero_shot_logits(model, head, xa);
                            return dlr ? dlr_per_sample(logits, l) : cross_entropy_per_sample(logits, l);
                          });
                          Rng rng(s);
                          return apgd(obj, xs, budget, &rng);
                        }});
    };
    if (opts.use_ce) add_stage(kCeName, false);
    if (opts.use_dlr) add_stage(kDlrName, true);
    auto res = composite_attack(xk, stages, [&](const Tensor& xa, std::span<const std::size_t> rows) {
      auto p = predict(model, head, xa);
      auto l = rows_labels(rows);
      std::vector<bool> hit(p.size());
      for (std::size_t j = 0; j < p.size(); ++j) hit[j] = p[j] != l[j];
      return hit;
    });
    for (std::size_t j = 0; j < keep.size(); ++j) broken_at[lo + keep[j]] = res.breaking_stage[j];
  });

  out.clean_per_class.assign(k, 0.0);
  out.robust_per_class.assign(k, 0.0);
  out.per_class_count.assign(k, 0);
  out.accuracy_after_stage.assign(n_stages, 0.0);
  std::size_t clean = 0, robust = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::size_t>(data.labels[out.indices[i]]);
    const bool rob = correct[i] && broken_at[i] < 0;
    if (label < k) {
      ++out.per_class_count[label];
      out.clean_per_class[label] += correct[i] ? 1.0 : 0.0;
      out.robust_per_class[label] += rob ? 1.0 : 0.0;
    }
    clean += correct[i];
    robust += rob;
    for (std::size_t s = 0; s < n_stages; ++s) {
      if (correct[i] && (broken_at[i] < 0 || broken_at[i] > static_cast<int>(s))) out.accuracy_after_stage[s] += 1.0;
    }
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (out.per_class_count[c] > 0) {
      out.clean_per_class[c] /= static_cast<double>(out.per_class_count[c]);
      out.robust_per_class[c] /= static_cast<double>(out.per_class_count[c]);
    }
  }
  const double dn = n > 0 ? static_cast<double>(n) : 1.0;
  for (auto& a : out.accuracy_after_stage) a /= dn;
  out.clean_accuracy = static_cast<double>(clean) / dn;
  out.robust_accuracy = static_cast<double>(robust) / dn;
  return out;
}

double token_accuracy(std::span<const int> predicted, std::span<const int> reference) {
  const std::size_t len = std::max(predicted.size(), reference.size());
  if (len == 0) return 1.0;
  std::size_t hits = 0;
  for (std::size_t t = 0; t < std::min(predicted.size(), reference.size()); ++t) hits += predicted[t] == reference[t];
  return static_cast<double>(hits) / static_cast<double>(len);
}

CaptionEval eval_caption_robustness(const Captioner& cap, const VisionEncoder& vision, const Dataset& data,
                                    const CaptionEvalOptions& opts) {
  CaptionEval out;
  out.indices = eval_subset(data, opts.samples, opts.seed);
  PerturbationBudget budget;
  budget.eps = opts.eps;
  budget.steps = opts.steps;
  budget.init = Init::RandomUniform;
  budget.validate();
  const auto instruction = describe_instruction();
  const std::size_t max_new = cap.config.max_text_len;

  std::size_t batch_no = 0;
  double clean_sum = 0.0, adv_sum = 0.0;
  for_batches(out.indices.size(), opts.batch_size, [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> idx(out.indices.begin() + lo, out.indices.begin() + hi);
    auto x = data.image_batch(idx);
    std::vector<TokenSeq> answers;
    for (auto i : idx) answers.push_back(canonical_answer(data.specs[i]));
    const auto batch = make_instruction_batch(x, instruction, answers);
    auto obj = make_objective([&](const Tensor& xa) -> Tensor {
      auto b = batch;
      b.images = xa;
      return answer_nll(caption_logits(cap, vision, b), b);
    });
    Rng rng(Rng::derive(opts.seed, 2000 + batch_no++));
    auto res = apgd(obj, x, budget, &rng);
    auto clean = generate(cap, vision, x, instruction, max_new);
    auto adv = generate(cap, vision, with_delta(x, res.delta), instruction, max_new);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto ref = strip_eos(answers[j]);
      clean_sum += token_accuracy(clean[j], ref);
      adv_sum += token_accuracy(adv[j], ref);
    }
  });
  const double n = out.indices.empty() ? 1.0 : static_cast<double>(out.indices.size());
  out.clean_token_accuracy = clean_sum / n;
  out.adv_token_accuracy = adv_sum / n;
  return out;
}

std::vector<std::string> default_targets() {
  return {"a blue cross in the bottom right", "a yellow triangle in the top left", "a green square in the center",
          "a red circle in the bottom left",  "a green cross in the top right",    "a yellow circle in the center"};
}

std::vector<TargetEval> eval_targeted_asr(const Captioner& cap, const VisionEncoder& vision, const Dataset& data,
                                          const std::vector<std::string>& targets, const TargetedEvalOptions& opts) {
  if (targets.empty()) throw EvalError("eval_targeted_asr: no targets");
  PerturbationBudget budget;
  budget.eps = opts.eps;
  budget.steps = opts.steps;
  budget.validate();
  const auto instruction = describe_instruction();
  const std::size_t max_new = cap.config.max_text_len;
  const auto pool = data.indices(Split::Val);

  std::vector<TargetEval> out;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    TargetEval r;
    r.target = targets[t];
    TokenSeq target;
    try {
      target = tokenize(targets[t]);
    } catch (const VocabError& e) {
      throw EvalError("eval_targeted_asr: target '" + targets[t] + "' is not tokenizable: " + e.what());
    }
    if (target.empty()) throw EvalError("eval_targeted_asr: empty target");

    auto order = pool;
    Rng rng(Rng::derive(opts.seed, t));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (auto i : order) {
      if (r.indices.size() == opts.samples_per_target) break;
      if (!contains_sequence(canonical_answer(data.specs[i]), target)) r.indices.push_back(i);
    }
    if (r.indices.size() < opts.samples_per_target) {
      throw EvalError("eval_targeted_asr: too few validation samples for target '" + targets[t] + "'");
    }
    if (r.indices.empty()) {
      out.push_back(r);
      continue;
    }

    auto x = data.image_batch(r.indices);
    auto res = targeted_caption_attack(cap, vision, x, instruction, target, budget, max_new);
    auto adv = generate(cap, vision, with_delta(x, res.delta), instruction, max_new);
    double acc = 0.0;
    for (std::size_t j = 0; j < r.indices.size(); ++j) {
      r.successes += res.success[j];
      acc += token_accuracy(adv[j], strip_eos(canonical_answer(data.specs[r.indices[j]])));
    }
    const double n = static_cast<double>(r.indices.size());
    r.asr = static_cast<double>(r.successes) / n;
    r.token_accuracy = acc / n;
    out.push_back(std::move(r));
  }
  return out;
}

double mean_asr(const std::vector<TargetEval>& results) {
  if (results.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : results) s += r.asr;
  return s / static_cast<double>(results.size());
}

// ---------------------------------------------------------------------------

void EvalReport::add_robust(const RobustEval& r, const RobustEvalOptions& opts, bool with_clean) {
  const std::size_t k = r.clean_per_class.size();
  if (with_clean) {
    rows.push_back({"clean_accuracy", "none", 0.0, 0, r.clean_accuracy, opts.seed, ""});
    for (std::size_t c = 0; c < k; ++c) {
      if (r.per_class_count[c] > 0) {
        rows.push_back({"clean_accuracy", "none", 0.0, 0, r.clean_per_class[c], opts.seed, class_name(int(c))});
      }
    }
  }
  std::string attack;
  for (std::size_t s = 0; s < r.stage_names.size(); ++s) {
    attack += (s ? "+" : "") + r.stage_names[s];
    rows.push_back({"robust_accuracy", attack, opts.eps, opts.steps, r.accuracy_after_stage[s], opts.seed, ""});
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (r.per_class_count[c] > 0) {
      rows.push_back({"robust_accuracy", attack, opts.eps, opts.steps, r.robust_per_class[c], opts.seed,
                      class_name(int(c))});
    }
  }
}

void EvalReport::add_caption(const CaptionEval& r, const CaptionEvalOptions& opts, bool with_clean) {
  if (with_clean) rows.push_back({"caption_token_accuracy", "none", 0.0, 0, r.clean_token_accuracy, opts.seed, ""});
  rows.push_back({"caption_token_accuracy", kInstrName, opts.eps, opts.steps, r.adv_token_accuracy, opts.seed, ""});
  rows.push_back({"caption_degradation", kInstrName, opts.eps, opts.steps, r.degradation(), opts.seed, ""});
}

void EvalReport::add_targeted(const std::vector<TargetEval>& r, const TargetedEvalOptions& opts) {
  double acc = 0.0;
  for (const auto& t : r) {
    rows.push_back({"asr", kTargetedName, opts.eps, opts.steps, t.asr, opts.seed, t.target});
    rows.push_back({"targeted_token_accuracy", kTargetedName, opts.eps, opts.steps, t.token_accuracy, opts.seed,
                    t.target});
    acc += t.token_accuracy;
  }
  const double n = r.empty() ? 1.0 : static_cast<double>(r.size());
  rows.push_back({"asr", kTargetedName, opts.eps, opts.steps, mean_asr(r), opts.seed, ""});
  rows.push_back({"targeted_token_accuracy", kTargetedName, opts.eps, opts.steps, acc / n, opts.seed, ""});
}

std::vector<MetricRow> EvalReport::find(const std::string& metric) const {
  std::vector<MetricRow> out;
  for (const auto& r : rows) {
    if (r.metric == metric) out.push_back(r);
  }
  return out;
}

void EvalReport::validate() const {
  for (const auto& r : rows) {
    if (!std::isfinite(r.value)) throw EvalError("report value for " + r.metric + " is not finite");
    if (r.metric == "caption_degradation") {
      if (r.value < -1.0 || r.value > 1.0) throw EvalError("caption degradation outside [-1, 1]");
    } else if (r.value < 0.0 || r.value > 1.0) {
      throw EvalError("rate " + r.metric + " outside [0, 1]: " + format_number(r.value));
    }
  }
}

std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["samples"] = r.samples;
  j["seeds"] = r.seeds;
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& m : r.rows) {
    nlohmann::ordered_json row;
    row["metric"] = m.metric;
    row["attack"] = m.attack;
    row["epsilon"] = m.epsilon;
    row["steps"] = m.steps;
    row["value"] = m.value;
    row["seed"] = m.seed;
    if (!m.detail.empty()) row["detail"] = m.detail;
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  EvalReport r;
  try {
    auto j = nlohmann::json::parse(text);
    r.model = j.at("model").get<std::string>();
    r.samples = j.at("samples").get<std::size_t>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    for (const auto& row : j.at("rows")) {
      MetricRow m;
      m.metric = row.at("metric").get<std::string>();
      m.attack = row.at("attack").get<std::string>();
      m.epsilon = row.at("epsilon").get<double>();
      m.steps = row.at("steps").get<std::size_t>();
      m.value = row.at("value").get<double>();
      m.seed = row.at("seed").get<std::uint64_t>();
      m.detail = row.value("detail", std::string());
      r.rows.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw EvalError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "metric,attack,epsilon,steps,value,seed\n";
  for (const auto& m : r.rows) {
    if (!m.detail.empty()) continue;
    os << m.metric << ',' << m.attack << ',' << format_number(m.epsilon) << ',' << m.steps << ','
       << format_number(m.value) << ',' << m.seed << '\n';
  }
  return os.str();
}

void save_report(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw EvalError("cannot write " + path.string());
  f << report_to_json(r);
  if (!f) throw EvalError("write failed: " + path.string());
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw EvalError("missing report file: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return report_from_json(ss.str());
}

}  // namespace dvd
