#include "dvd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <json.hpp>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "dvd/checkpoint.hpp"

namespace dvd {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void copy_into(const ParamList& dst, const ParamList& src) { assign_params(dst, src); }

}  // namespace

std::string variant_name(ClipVariant v) { return v == ClipVariant::Clean ? "clean" : "adversarial"; }

std::string variant_name(CaptionVariant v) {
  switch (v) {
    case CaptionVariant::Llava: return "llava";
    case CaptionVariant::Delta: return "delta";
    case CaptionVariant::Delta2: return "delta2";
    case CaptionVariant::CrashProbe: return "crash-probe";
  }
  return "?";
}

ClipVariant parse_clip_variant(const std::string& s) {
  if (s == "clean") return ClipVariant::Clean;
  if (s == "adversarial") return ClipVariant::Adversarial;
  throw ConfigError("unknown clip variant '" + s + "' (clean, adversarial)");
}

CaptionVariant parse_caption_variant(const std::string& s) {
  for (auto v : {CaptionVariant::Llava, CaptionVariant::Delta, CaptionVariant::Delta2, CaptionVariant::CrashProbe}) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown captioner variant '" + s + "' (llava, delta, delta2, crash-probe)");
}

std::vector<TrainStageConfig> clip_stages(const RunConfig& c, ClipVariant v) {
  const bool adversarial = v == ClipVariant::Adversarial;
  const double scale = adversarial ? c.clip.adversarial_sample_ratio : 1.0;
  const auto first = static_cast<std::size_t>(std::llround(static_cast<double>(c.clip.first_stage_samples) * scale));
  auto stages = default_stages(std::max<std::size_t>(first, 1), adversarial);
  for (auto& s : stages) {
    s.lr = c.clip.lr;
    s.batch_size = c.clip.batch_size;
    s.lambda = c.clip.lambda;
  }
  return stages;
}

std::size_t final_resolution(const RunConfig& c) { return clip_stages(c, ClipVariant::Clean).back().resolution; }

Dataset eval_dataset(const RunConfig& c) {
  return make_dataset(c.data.size, static_cast<int>(final_resolution(c)), c.data.seed, c.data.style());
}

ClipModel train_clip_variant(const RunConfig& c, ClipVariant v, const ClipModel* clean, const MetricSink& sink) {
  ClipTrainOptions opts;
  opts.stages = clip_stages(c, v);
  opts.weight_decay = c.clip.weight_decay;
  opts.mix_clean = c.clip.mix_clean;
  opts.attack_contrastive_only = c.clip.attack_contrastive_only;
  opts.vision_only = c.clip.vision_only;
  opts.patch_transfer = c.clip.patch_transfer;
  opts.dataset_size = c.data.size;
  opts.data_seed = c.data.seed;
  opts.style = c.data.style();

  const std::string tag = "clip_" + variant_name(v);
  auto on_step = [&](const ClipStepMetrics& m) {
    if (!sink) return;
    const std::string t = tag + "/step/" + std::to_string(m.step);
    sink(t, "stage", static_cast<double>(m.stage));
    sink(t, "lr", m.lr);
    sink(t, "clean_loss", m.clean_loss);
    sink(t, "adv_loss", m.adv_loss);
    sink(t, "contrastive", m.contrastive);
    sink(t, "captioning", m.captioning);
    sink(t, "match_accuracy", m.match_accuracy);
    sink(t, "delta_max", m.delta_max);
  };

  const std::size_t res0 = opts.stages.front().resolution;
  if (v == ClipVariant::Clean) {
    auto model = init_clip_model(c.model, res0, Rng::derive(c.seed, 1));
    set_requires_grad(params_of(model), true);
    pretrain_text_encoder(model, opts, Rng::derive(c.seed, 3), on_step);
    set_requires_grad(params_of(model), false);
    return model;
  }
  if (!clean) throw std::invalid_argument("adversarial clip training needs the clean model's text encoder");
  auto model = init_clip_model(c.model, res0, Rng::derive(c.seed, 2));
  copy_into(params_of(model.encoder.text), params_of(clean->encoder.text));
  copy_into({{"logit_scale", model.encoder.logit_scale}}, {{"logit_scale", clean->encoder.logit_scale}});
  set_requires_grad(params_of(model), true);
  set_requires_grad(params_of(model.encoder.text), false);
  train_clip_staged(model, opts, Rng::derive(c.seed, 4), on_step);
  set_requires_grad(params_of(model), false);
  return model;
}

InstructionTuneConfig captioner_config(const RunConfig& c, CaptionVariant v) {
  InstructionTuneConfig t;
  t.attack_steps = c.captioner.attack_steps;
  t.eps = c.captioner.eps;
  t.epochs = c.captioner.epochs;
  t.lr = c.captioner.lr;
  t.batch_size = c.captioner.batch_size;
  t.weight_decay = c.captioner.weight_decay;
  t.adversarial = v == CaptionVariant::Delta2 || v == CaptionVariant::CrashProbe;
  t.vision_lr_ratio = t.adversarial ? c.captioner.vision_lr_ratio : 0.0;
  return t;
}

CaptionModel train_caption_variant(const RunConfig& c, CaptionVariant v, const VisionEncoder& clean_vision,
                                   const VisionEncoder& robust_vision, const MetricSink& sink) {
  const bool robust = v == CaptionVariant::Delta || v == CaptionVariant::Delta2;
  const auto data = eval_dataset(c);
  const std::string tag = "captioner_" + variant_name(v);
  auto on_step = [&](const InstructionStepMetrics& m) {
    if (!sink) return;
    const std::string t = tag + "/step/" + std::to_string(m.step);
    sink(t, "lr", m.lr);
    sink(t, "clean_loss", m.clean_loss);
    sink(t, "adv_loss", m.adv_loss);
    sink(t, "delta_max", m.delta_max);
  };
  return train_captioner(captioner_config(c, v), robust ? robust_vision : clean_vision, c.model, data,
                         Rng::derive(c.seed, 10 + static_cast<std::uint64_t>(v)), nullptr, on_step);
}

EvalReport evaluate_clip(const RunConfig& c, const DualEncoder& model, const std::string& name, const Dataset& data) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport report;
  report.model = name;
  report.samples = c.eval.zero_shot_samples;
  report.seeds = {c.seed, c.data.seed, c.eval.seed};
  const auto head = build_zero_shot_head(model, default_class_names(), default_prompt_templates());
  bool first = true;
  for (double eps : c.eval.zero_shot_eps) {
    RobustEvalOptions o;
    o.eps = eps;
    o.steps = c.eval.zero_shot_steps;
    o.samples = c.eval.zero_shot_samples;
    o.seed = c.eval.seed;
    report.add_robust(eval_robust_accuracy(model, head, data, o), o, first);
    first = false;
  }
  report.wall_clock_seconds = seconds_since(t0);
  report.validate();
  return report;
}

EvalReport evaluate_captioner(const RunConfig& c, const CaptionModel& model, const std::string& name,
                              const Dataset& data) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport report;
  report.model = name;
  report.samples = c.eval.caption_samples;
  report.seeds = {c.seed, c.data.seed, c.eval.seed};
  bool first = true;
  for (double eps : c.eval.caption_eps) {
    CaptionEvalOptions o;
    o.eps = eps;
    o.steps = c.eval.caption_steps;
    o.samples = c.eval.caption_samples;
    o.seed = c.eval.seed;
    report.add_caption(eval_caption_robustness(model.cap, model.vision, data, o), o, first);
    first = false;
  }
  const auto targets = c.eval.targets.empty() ? default_targets() : c.eval.targets;
  for (double eps : c.eval.targeted_eps) {
    TargetedEvalOptions o;
    o.eps = eps;
    o.steps = c.eval.targeted_steps;
    o.samples_per_target = c.eval.targeted_samples;
    o.seed = c.eval.seed;
    report.add_targeted(eval_targeted_asr(model.cap, model.vision, data, targets, o), o);
  }
  report.wall_clock_seconds = seconds_since(t0);
  report.validate();
  return report;
}

ClipModel load_clip_model(const RunConfig& c, const std::filesystem::path& path) {
  auto model = init_clip_model(c.model, final_resolution(c), 0);
  assign_params(params_of(model), load_checkpoint(path));
  return model;
}

CaptionModel load_caption_model(const RunConfig& c, const std::filesystem::path& path) {
  Rng rng(0);
  CaptionModel model{init_vision(c.model, final_resolution(c), rng), init_captioner(c.model, 0)};
  assign_params(params_of(model), load_checkpoint(path));
  return model;
}

// ---------------------------------------------------------------------------

RunDirectory::RunDirectory(std::filesystem::path root, const RunConfig& c) : root_(std::move(root)) {
  namespace fs = std::filesystem;
  fs::create_directories(root_ / "checkpoints");
  fs::create_directories(root_ / "reports");
  run_id_ = fs::absolute(root_).lexically_normal().filename().string();
  if (run_id_.empty()) run_id_ = fs::absolute(root_).lexically_normal().parent_path().filename().string();
  const auto resolved = resolved_config(c);
  const auto path = root_ / "config.resolved";
  if (fs::exists(path)) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    if (ss.str() != resolved) {
      throw ConfigError("run directory " + root_.string() + " was created with a different configuration");
    }
  } else {
    std::ofstream f(path, std::ios::binary);
    f << resolved;
    if (!f) throw std::runtime_error("cannot write " + path.string());
  }
}

std::filesystem::path RunDirectory::checkpoint(const std::string& name) const {
  return root_ / "checkpoints" / (name + ".ddf");
}

std::filesystem::path RunDirectory::report(const std::string& name, const std::string& ext) const {
  return root_ / "reports" / (name + "." + ext);
}

void RunDirectory::append_metric(const std::string& tag, const std::string& metric, double value) const {
  nlohmann::ordered_json j;
  j["run"] = run_id_;
  j["tag"] = tag;
  j["metric"] = metric;
  j["value"] = value;
  j["timestamp"] = utc_timestamp();
  std::ofstream f(root_ / "metrics.jsonl", std::ios::app | std::ios::binary);
  f << j.dump() << '\n';
  if (!f) throw std::runtime_error("cannot append to metrics.jsonl");
}

MetricSink RunDirectory::sink() const {
  return [this](const std::string& tag, const std::string& metric, double value) { append_metric(tag, metric, value); };
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace dvd
