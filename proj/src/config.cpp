#include "dvd/config.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "dvd/eval.hpp"

namespace dvd {

namespace {

namespace pt = boost::property_tree;

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto t = trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  auto t = trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) {
    throw ConfigError("not a non-negative integer: '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& s) {
  const auto t = trim(s);
  if (t == "true") return true;
  if (t == "false") return false;
  throw ConfigError("not a boolean (true/false): '" + s + "'");
}

std::string join_eps(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_number(v[i]);
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <typename T>
Field size_field(std::string sec, std::string key, T& ref, std::uint64_t min_value = 0) {
  return {sec, key,
          [&ref, min_value, key](const std::string& s) {
            const auto v = parse_uint(s);
            if (v < min_value) throw ConfigError(key + " must be at least " + std::to_string(min_value));
            ref = static_cast<T>(v);
          },
          [&ref] { return std::to_string(ref); }};
}

Field real_field(std::string sec, std::string key, double& ref, double lo, double hi) {
  return {sec, key,
          [&ref, lo, hi, key](const std::string& s) {
            const auto v = parse_fraction(s);
            if (!(v >= lo && v <= hi)) {
              throw ConfigError(key + " must lie in [" + format_number(lo) + ", " + format_number(hi) + "]");
            }
            ref = v;
          },
          [&ref] { return format_number(ref); }};
}

Field bool_field(std::string sec, std::string key, bool& ref) {
  return {sec, key, [&ref](const std::string& s) { ref = parse_bool(s); },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field eps_list_field(std::string sec, std::string key, std::vector<double>& ref) {
  return {sec, key,
          [&ref, key](const std::string& s) {
            std::vector<double> v;
            for (const auto& part : split(s, ',')) {
              const double e = parse_fraction(part);
              if (!(e >= 0.0 && e <= 1.0)) throw ConfigError(key + " entries must lie in [0, 1]");
              v.push_back(e);
            }
            if (v.empty()) throw ConfigError(key + " needs at least one radius");
            ref = std::move(v);
          },
          [&ref] { return join_eps(ref); }};
}

std::vector<Field> schema(RunConfig& c) {
  constexpr double kInf = 1e300;
  auto& m = c.model;
  return {
      size_field("run", "seed", c.seed),
      size_field("data", "size", c.data.size, 16),
      size_field("data", "seed", c.data.seed),
      real_field("data", "contrast", c.data.contrast, 0.0, 0.5),
      real_field("data", "noise_sigma", c.data.noise_sigma, 0.0, 0.5),
      real_field("data", "background", c.data.background, 0.0, 1.0),
      size_field("model", "width", m.width, 1),
      size_field("model", "heads", m.heads, 1),
      size_field("model", "depth", m.depth, 1),
      size_field("model", "mlp_ratio", m.mlp_ratio, 1),
      size_field("model", "embed_dim", m.embed_dim, 1),
      size_field("model", "grid", m.grid, 1),
      size_field("model", "max_text_len", m.max_text_len, 1),
      size_field("model", "max_seq_len", m.max_seq_len, 1),
      real_field("model", "init_logit_scale", m.init_logit_scale, -kInf, kInf),
      real_field("model", "max_logit_scale", m.max_logit_scale, -kInf, kInf),
      size_field("clip", "first_stage_samples", c.clip.first_stage_samples, 1),
      real_field("clip", "adversarial_sample_ratio", c.clip.adversarial_sample_ratio, 0.01, kInf),
      real_field("clip", "lr", c.clip.lr, 0.0, kInf),
      real_field("clip", "weight_decay", c.clip.weight_decay, 0.0, kInf),
      size_field("clip", "batch_size", c.clip.batch_size, 1),
      real_field("clip", "lambda", c.clip.lambda, 0.0, kInf),
      {"clip", "patch_transfer",
       [&c](const std::string& s) {
         const auto t = trim(s);
         if (t == "resample") {
           c.clip.patch_transfer = PatchTransfer::Resample;
         } else if (t == "reinit") {
           c.clip.patch_transfer = PatchTransfer::Reinit;
         } else {
           throw ConfigError("patch_transfer must be resample or reinit");
         }
       },
       [&c] { return std::string(c.clip.patch_transfer == PatchTransfer::Resample ? "resample" : "reinit"); }},
      bool_field("clip", "mix_clean", c.clip.mix_clean),
      bool_field("clip", "attack_contrastive_only", c.clip.attack_contrastive_only),
      bool_field("clip", "vision_only", c.clip.vision_only),
      size_field("captioner", "epochs", c.captioner.epochs, 1),
      real_field("captioner", "lr", c.captioner.lr, 0.0, kInf),
      real_field("captioner", "vision_lr_ratio", c.captioner.vision_lr_ratio, 0.0, kInf),
      size_field("captioner", "attack_steps", c.captioner.attack_steps, 1),
      real_field("captioner", "eps", c.captioner.eps, 0.0, 1.0),
      size_field("captioner", "batch_size", c.captioner.batch_size, 1),
      real_field("captioner", "weight_decay", c.captioner.weight_decay, 0.0, kInf),
      size_field("eval", "seed", c.eval.seed),
      size_field("eval", "zero_shot_samples", c.eval.zero_shot_samples, 1),
      size_field("eval", "zero_shot_steps", c.eval.zero_shot_steps, 1),
      eps_list_field("eval", "zero_shot_eps", c.eval.zero_shot_eps),
      size_field("eval", "caption_samples", c.eval.caption_samples, 1),
      size_field("eval", "caption_steps", c.eval.caption_steps, 1),
      eps_list_field("eval", "caption_eps", c.eval.caption_eps),
      size_field("eval", "targeted_steps", c.eval.targeted_steps, 1),
      size_field("eval", "targeted_samples", c.eval.targeted_samples, 1),
      eps_list_field("eval", "targeted_eps", c.eval.targeted_eps),
      {"eval", "targets", [&c](const std::string& s) { c.eval.targets = split(s, ';'); },
       [&c] {
         std::string out;
         for (std::size_t i = 0; i < c.eval.targets.size(); ++i) out += (i ? "; " : "") + c.eval.targets[i];
         return out;
       }},
  };
}

}  // namespace

double parse_fraction(const std::string& text) {
  const auto slash = text.find('/');
  if (slash == std::string::npos) return parse_double(text);
  const double num = parse_double(text.substr(0, slash));
  const double den = parse_double(text.substr(slash + 1));
  if (den == 0.0) throw ConfigError("zero denominator in '" + text + "'");
  return num / den;
}

RunConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  RunConfig c;
  auto fields = schema(c);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside any section");
    if (std::none_of(fields.begin(), fields.end(), [&](const Field& f) { return f.section == section; })) {
      throw ConfigError("unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      auto it = std::find_if(fields.begin(), fields.end(),
                             [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == fields.end()) throw ConfigError("unknown key [" + section + "] " + key);
      try {
        it->set(value.get_value<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError("[" + section + "] " + key + ": " + e.what());
      }
    }
  }
  if (c.model.width % c.model.heads != 0) throw ConfigError("[model] width must be divisible by heads");
  std::size_t val = 0;
  for (std::size_t i = 0; i < c.data.size; ++i) val += split_of(i) == Split::Val;
  if (std::max(c.eval.zero_shot_samples, c.eval.caption_samples) > val) {
    throw ConfigError("[eval] sample counts exceed the " + std::to_string(val) + " validation samples of [data] size");
  }
  for (const auto& t : c.eval.targets) {
    try {
      tokenize(t);
    } catch (const VocabError& e) {
      throw ConfigError("[eval] targets: '" + t + "' is not tokenizable: " + e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string resolved_config(const RunConfig& c) {
  RunConfig copy = c;
  auto fields = schema(copy);
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields) {
    if (f.section != section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << f.get() << '\n';
  }
  return out.str();
}

}  // namespace dvd
