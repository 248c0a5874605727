// Command-line entry point: data generation, training, attacks, evaluation
// and reporting over run directories.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <iostream>

#include "dvd/checkpoint.hpp"
#include "dvd/losses.hpp"
#include "dvd/pipeline.hpp"
#include "dvd/report.hpp"

namespace fs = std::filesystem;
using namespace dvd;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig config_from(const std::string& path) { return path.empty() ? RunConfig{} : load_config(path); }

void log(const std::string& msg) { std::cerr << msg << '\n'; }

void record_report(const RunDirectory& run, const EvalReport& r) {
  save_report(run.report(r.model, "json"), r);
  std::ofstream(run.report(r.model, "csv"), std::ios::binary) << report_to_csv(r);
  for (const auto& row : r.rows) {
    if (!row.detail.empty()) continue;
    run.append_metric("eval/" + r.model, row.metric + "@" + row.attack + "@" + format_number(row.epsilon), row.value);
  }
}

int cmd_gen_data(const std::string& out, std::size_t n, int res, std::uint64_t seed, double contrast, double noise) {
  if (!supported_resolution(res)) throw UsageError("unsupported resolution " + std::to_string(res));
  fs::path path = out;
  if (fs::is_directory(path) || out.empty() || out.back() == '/') path /= "dataset.dds";
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  RenderStyle style;
  style.contrast = contrast;
  style.noise_sigma = noise;
  auto data = make_dataset(n, res, seed, style);
  save_dataset(path, data);
  std::cout << path.string() << " " << data.size() << " samples, checksum " << dataset_checksum(data) << '\n';
  return 0;
}

int cmd_train_clip(const RunConfig& c, const fs::path& dir, const std::string& variant) {
  const auto v = parse_clip_variant(variant);
  RunDirectory run(dir, c);
  std::unique_ptr<ClipModel> clean;
  if (v == ClipVariant::Adversarial) {
    const auto src = run.checkpoint("clip_clean");
    if (!fs::exists(src)) throw std::runtime_error("missing " + src.string() + "; run train-clip --variant clean first");
    clean = std::make_unique<ClipModel>(load_clip_model(c, src));
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto model = train_clip_variant(c, v, clean.get(), run.sink());
  const auto name = "clip_" + variant_name(v);
  save_checkpoint(run.checkpoint(name), params_of(model));
  log(name + " trained in " +
      format_number(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
  return 0;
}

int cmd_train_captioner(const RunConfig& c, const fs::path& dir, const std::string& variant) {
  const auto v = parse_caption_variant(variant);
  RunDirectory run(dir, c);
  const bool robust = v == CaptionVariant::Delta || v == CaptionVariant::Delta2;
  const auto src = run.checkpoint(robust ? "clip_adversarial" : "clip_clean");
  if (!fs::exists(src)) throw std::runtime_error("missing vision source " + src.string());
  const auto source = load_clip_model(c, src);
  auto model = train_caption_variant(c, v, source.encoder.vision, source.encoder.vision, run.sink());
  save_checkpoint(run.checkpoint("captioner_" + variant_name(v)), params_of(model));
  return 0;
}

std::vector<std::string> available_models(const RunDirectory& run) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(run.root() / "checkpoints")) {
    if (e.path().extension() == ".ddf") names.push_back(e.path().stem().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

int cmd_eval(const RunConfig& c, const fs::path& dir, std::vector<std::string> models) {
  RunDirectory run(dir, c);
  if (models.empty()) models = available_models(run);
  if (models.empty()) throw std::runtime_error("no checkpoints in " + (run.root() / "checkpoints").string());
  const auto data = eval_dataset(c);
  for (const auto& name : models) {
    const auto path = run.checkpoint(name);
    if (!fs::exists(path)) throw std::runtime_error("missing checkpoint " + path.string());
    EvalReport r;
    if (name.rfind("clip_", 0) == 0) {
      r = evaluate_clip(c, load_clip_model(c, path).encoder, name, data);
    } else if (name.rfind("captioner_", 0) == 0) {
      r = evaluate_captioner(c, load_caption_model(c, path), name, data);
    } else {
      throw UsageError("cannot tell the model kind of '" + name + "'");
    }
    record_report(run, r);
    log(name + " evaluated in " + format_number(r.wall_clock_seconds) + " s");
  }
  return 0;
}

// Single attack on one checkpoint; writes reports/attack_<model>.json.
int cmd_attack(const RunConfig& c, const fs::path& dir, const std::string& model, const std::string& attack,
               const std::string& eps_text, std::size_t steps, std::size_t samples, const std::string& target) {
  RunDirectory run(dir, c);
  const auto path = run.checkpoint(model);
  if (!fs::exists(path)) throw std::runtime_error("missing checkpoint " + path.string());
  const double eps = parse_fraction(eps_text);
  const auto data = eval_dataset(c);
  EvalReport r;
  r.model = "attack_" + model;
  r.seeds = {c.seed, c.data.seed, c.eval.seed};
  const auto t0 = std::chrono::steady_clock::now();

  if (model.rfind("clip_", 0) == 0) {
    const auto m = load_clip_model(c, path);
    const auto head = build_zero_shot_head(m.encoder, default_class_names(), default_prompt_templates());
    const auto idx = eval_subset(data, samples, c.eval.seed);
    r.samples = idx.size();
    if (attack == "apgd-ce" || attack == "apgd-dlr" || attack == "apgd-ce+dlr") {
      RobustEvalOptions o;
      o.eps = eps;
      o.steps = steps;
      o.samples = samples;
      o.seed = c.eval.seed;
      o.use_ce = attack != "apgd-dlr";
      o.use_dlr = attack != "apgd-ce";
      r.add_robust(eval_robust_accuracy(m.encoder, head, data, o), o, true);
    } else if (attack == "fgsm" || attack == "pgd") {
      auto x = data.image_batch(idx);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(data.labels[i]);
      auto obj = make_objective([&](const Tensor& xa) -> Tensor {
        return cross_entropy_per_sample(zero_shot_logits(m.encoder, head, xa), labels);
      });
      PerturbationBudget b;
      b.eps = eps;
      b.steps = attack == "fgsm" ? 1 : steps;
      Rng rng(c.eval.seed);
      auto res = attack == "fgsm" ? fgsm(obj, x, eps) : pgd(obj, x, b, &rng);
      auto xv = x.data();
      auto dv = res.delta.data();
      std::vector<double> adv(xv.size());
      for (std::size_t j = 0; j < adv.size(); ++j) adv[j] = xv[j] + dv[j];
      NoGradGuard guard;
      auto clean = classify(head, encode_image(m.encoder, x)).labels;
      auto pred = classify(head, encode_image(m.encoder, Tensor(x.shape(), std::move(adv)))).labels;
      double acc = 0.0, rob = 0.0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        acc += clean[i] == labels[i];
        rob += clean[i] == labels[i] && pred[i] == labels[i];
      }
      const double n = static_cast<double>(labels.size());
      r.rows.push_back({"clean_accuracy", "none", 0.0, 0, acc / n, c.eval.seed, ""});
      r.rows.push_back({"robust_accuracy", attack, eps, b.steps, rob / n, c.eval.seed, ""});
    } else {
      throw UsageError("attack on an encoder must be fgsm, pgd, apgd-ce, apgd-dlr or apgd-ce+dlr");
    }
  } else if (model.rfind("captioner_", 0) == 0) {
    const auto m = load_caption_model(c, path);
    if (attack == "apgd-instr") {
      CaptionEvalOptions o;
      o.eps = eps;
      o.steps = steps;
      o.samples = samples;
      o.seed = c.eval.seed;
      r.samples = samples;
      r.add_caption(eval_caption_robustness(m.cap, m.vision, data, o), o, true);
    } else if (attack == "apgd-targeted") {
      if (target.empty()) throw UsageError("apgd-targeted needs --target");
      TargetedEvalOptions o;
      o.eps = eps;
      o.steps = steps;
      o.samples_per_target = samples;
      o.seed = c.eval.seed;
      r.samples = samples;
      r.add_targeted(eval_targeted_asr(m.cap, m.vision, data, {target}, o), o);
    } else {
      throw UsageError("attack on a captioner must be apgd-instr or apgd-targeted");
    }
  } else {
    throw UsageError("cannot tell the model kind of '" + model + "'");
  }
  r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_report(run, r);
  std::cout << report_to_csv(r);
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<fs::path> paths(runs.begin(), runs.end());
  for (const auto& p : emit_report(paths, out)) std::cout << p.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Desk-scale double visual defense laboratory"};
  app.require_subcommand(1);

  std::string out, config, run_dir, variant, model, attack, eps = "4/255", target;
  std::size_t n = 160, steps = 20, samples = 64;
  int res = 32;
  std::uint64_t seed = 0;
  double contrast = RenderStyle{}.contrast, noise = RenderStyle{}.noise_sigma;
  std::vector<std::string> models, runs;

  auto* gen = app.add_subcommand("gen-data", "Render a DDS1 dataset");
  gen->add_option("--out", out, "Output file or directory")->required();
  gen->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--res", res, "Resolution (16 or 32)");
  gen->add_option("--seed", seed, "Seed");
  gen->add_option("--contrast", contrast, "Color contrast around the background")->check(CLI::Range(0.0, 0.5));
  gen->add_option("--noise", noise, "Pixel noise sigma")->check(CLI::Range(0.0, 0.5));

  auto with_run = [&](CLI::App* sub) {
    sub->add_option("--config", config, "Run configuration file")->check(CLI::ExistingFile);
    sub->add_option("--run", run_dir, "Run directory")->required();
  };
  auto* tclip = app.add_subcommand("train-clip", "Train the clean or adversarial dual encoder");
  with_run(tclip);
  tclip->add_option("--variant", variant, "clean | adversarial")->required();
  auto* tcap = app.add_subcommand("train-captioner", "Instruction-tune a captioner");
  with_run(tcap);
  tcap->add_option("--variant", variant, "llava | delta | delta2 | crash-probe")->required();
  auto* atk = app.add_subcommand("attack", "Run one attack against a checkpoint");
  with_run(atk);
  atk->add_option("--model", model, "Checkpoint name, e.g. clip_clean")->required();
  atk->add_option("--attack", attack, "fgsm | pgd | apgd-ce | apgd-dlr | apgd-ce+dlr | apgd-instr | apgd-targeted")
      ->required();
  atk->add_option("--eps", eps, "Radius, e.g. 4/255");
  atk->add_option("--steps", steps, "Attack iterations")->check(CLI::PositiveNumber);
  atk->add_option("--samples", samples, "Samples (per target for apgd-targeted)")->check(CLI::PositiveNumber);
  atk->add_option("--target", target, "Target string for apgd-targeted");
  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints of a run");
  with_run(ev);
  ev->add_option("--model", models, "Checkpoint names; all when omitted");
  auto* rep = app.add_subcommand("report", "Figures and tables from run directories");
  rep->add_option("--runs", runs, "Run directories")->required();
  rep->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*gen) return cmd_gen_data(out, n, res, seed, contrast, noise);
    if (*rep) return cmd_report(runs, out);
    const auto c = config_from(config);
    if (*tclip) return cmd_train_clip(c, run_dir, variant);
    if (*tcap) return cmd_train_captioner(c, run_dir, variant);
    if (*atk) return cmd_attack(c, run_dir, model, attack, eps, steps, samples, target);
    if (*ev) return cmd_eval(c, run_dir, models);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}
