#include "branchkit/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace branchkit::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text) {
  ConfigFile cf;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (key.empty()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    }
    cf.sections_[section][key] = Entry{value, false};
  }
  return cf;
}

ConfigFile ConfigFile::parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse(os.str());
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  return s != sections_.end() && s->second.count(key) > 0;
}

std::string ConfigFile::get_string(const std::string& section, const std::string& key,
                                   const std::string& fallback) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return fallback;
  auto k = s->second.find(key);
  if (k == s->second.end()) return fallback;
  k->second.consumed = true;
  return k->second.value;
}

std::int64_t ConfigFile::get_int(const std::string& section, const std::string& key,
                                 std::int64_t fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get_string(section, key, "");
  try {
    std::size_t pos = 0;
    const std::int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: [" + section + "] " + key + " = '" + v +
                                "' is not an integer");
  }
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get_string(section, key, "");
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: [" + section + "] " + key + " = '" + v +
                                "' is not a number");
  }
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key,
                          bool fallback) const {
  if (!has(section, key)) return fallback;
  const std::string v = get_string(section, key, "");
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: [" + section + "] " + key + " = '" + v +
                              "' is not a boolean");
}

std::vector<std::string> ConfigFile::unconsumed() const {
  std::vector<std::string> out;
  for (const auto& [section, keys] : sections_) {
    for (const auto& [key, entry] : keys) {
      if (!entry.consumed) out.push_back("[" + section + "] " + key);
    }
  }
  return out;
}

TrainConfig TrainConfig::from_string(const std::string& text) {
  const ConfigFile cf = ConfigFile::parse(text);
  TrainConfig c;

  const std::string preset = cf.get_string("model", "preset", "");
  if (!preset.empty()) c.model = nn::EncoderConfig::preset(preset);
  const std::string kind = cf.get_string("model", "kind",
                                         c.model.kind == nn::LayerKind::conformer
                                             ? "conformer"
                                             : "e_branchformer");
  if (kind == "conformer") {
    c.model.kind = nn::LayerKind::conformer;
  } else if (kind == "e_branchformer") {
    c.model.kind = nn::LayerKind::e_branchformer;
  } else {
    throw std::invalid_argument("config: unknown model kind '" + kind + "'");
  }
  c.model.num_layers = cf.get_int("model", "layers", c.model.num_layers);
  c.model.d = cf.get_int("model", "d", c.model.d);
  c.model.heads = cf.get_int("model", "heads", c.model.heads);
  c.model.ffn_expansion = cf.get_double("model", "ffn_expansion", c.model.ffn_expansion);
  c.model.mlp_expansion = cf.get_double("model", "mlp_expansion", c.model.mlp_expansion);
  c.model.k_conv = cf.get_int("model", "k_conv", c.model.k_conv);
  c.model.k_mlp = cf.get_int("model", "k_mlp", c.model.k_mlp);
  c.model.k_merge = cf.get_int("model", "k_merge", c.model.k_merge);
  c.model.dropout = cf.get_double("model", "dropout", c.model.dropout);
  c.model.attn_dropout = cf.get_double("model", "attn_dropout", c.model.attn_dropout);
  c.model.stochastic_depth = cf.get_double("model", "stochastic_depth", c.model.stochastic_depth);
  const std::string merge = cf.get_string("model", "merge_mode", "additive");
  if (merge == "additive") {
    c.model.merge_mode = nn::MergeMode::additive;
  } else if (merge == "conv_in_place") {
    c.model.merge_mode = nn::MergeMode::conv_in_place;
  } else {
    throw std::invalid_argument("config: unknown merge_mode '" + merge + "'");
  }
  c.model.cgmlp_gate_bias = cf.get_bool("model", "cgmlp_gate_bias", c.model.cgmlp_gate_bias);

  c.vocab = cf.get_int("task", "vocab", c.vocab);
  c.task.vocab = c.vocab;
  c.task.feat_dim = cf.get_int("task", "feat_dim", c.task.feat_dim);
  c.model.feat_dim = c.task.feat_dim;
  c.task.min_label_len = cf.get_int("task", "min_label_len", c.task.min_label_len);
  c.task.max_label_len = cf.get_int("task", "max_label_len", c.task.max_label_len);
  c.task.min_frames_per_token = cf.get_int("task", "min_frames_per_token", c.task.min_frames_per_token);
  c.task.max_frames_per_token = cf.get_int("task", "max_frames_per_token", c.task.max_frames_per_token);
  c.task.noise_std = cf.get_double("task", "noise_std", c.task.noise_std);
  c.task.min_template_dist = cf.get_double("task", "min_template_dist", c.task.min_template_dist);
  c.task.train_utts = cf.get_int("task", "train_utts", c.task.train_utts);
  c.task.val_utts = cf.get_int("task", "val_utts", c.task.val_utts);
  c.task.template_seed = static_cast<std::uint64_t>(cf.get_int("task", "template_seed",
                                                               static_cast<std::int64_t>(c.task.template_seed)));
  c.task.train_seed = static_cast<std::uint64_t>(cf.get_int("task", "train_seed",
                                                            static_cast<std::int64_t>(c.task.train_seed)));
  c.task.val_seed = static_cast<std::uint64_t>(cf.get_int("task", "val_seed",
                                                          static_cast<std::int64_t>(c.task.val_seed)));

  c.peak_lr = cf.get_double("train", "peak_lr", c.peak_lr);
  c.warmup_steps = cf.get_int("train", "warmup_steps", c.warmup_steps);
  c.epochs = cf.get_int("train", "epochs", c.epochs);
  c.batch_frames = cf.get_int("train", "batch_frames", c.batch_frames);
  c.seed = static_cast<std::uint64_t>(cf.get_int("train", "seed", static_cast<std::int64_t>(c.seed)));
  c.clip_norm = cf.get_double("train", "clip_norm", c.clip_norm);
  c.weight_decay = cf.get_double("train", "weight_decay", c.weight_decay);
  c.log_every = cf.get_int("train", "log_every", c.log_every);

  c.specaug.n_time_masks = cf.get_int("specaug", "n_time_masks", c.specaug.n_time_masks);
  c.specaug.max_time_width = cf.get_int("specaug", "max_time_width", c.specaug.max_time_width);
  c.specaug.n_freq_masks = cf.get_int("specaug", "n_freq_masks", c.specaug.n_freq_masks);
  c.specaug.max_freq_width = cf.get_int("specaug", "max_freq_width", c.specaug.max_freq_width);

  const auto leftover = cf.unconsumed();
  if (!leftover.empty()) {
    std::string msg = "config: unknown keys:";
    for (const auto& k : leftover) msg += " " + k;
    throw std::invalid_argument(msg);
  }
  c.task.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return from_string(os.str());
}

std::string TrainConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "[model]\n";
  os << "kind = " << (model.kind == nn::LayerKind::conformer ? "conformer" : "e_branchformer")
     << "\n";
  os << "layers = " << model.num_layers << "\n";
  os << "d = " << model.d << "\n";
  os << "heads = " << model.heads << "\n";
  os << "ffn_expansion = " << model.ffn_expansion << "\n";
  os << "mlp_expansion = " << model.mlp_expansion << "\n";
  os << "k_conv = " << model.k_conv << "\n";
  os << "k_mlp = " << model.k_mlp << "\n";
  os << "k_merge = " << model.k_merge << "\n";
  os << "dropout = " << model.dropout << "\n";
  os << "attn_dropout = " << model.attn_dropout << "\n";
  os << "stochastic_depth = " << model.stochastic_depth << "\n";
  os << "merge_mode = "
     << (model.merge_mode == nn::MergeMode::additive ? "additive" : "conv_in_place") << "\n";
  os << "cgmlp_gate_bias = " << (model.cgmlp_gate_bias ? "true" : "false") << "\n";
  os << "\n[task]\n";
  os << "vocab = " << vocab << "\n";
  os << "feat_dim = " << task.feat_dim << "\n";
  os << "min_label_len = " << task.min_label_len << "\n";
  os << "max_label_len = " << task.max_label_len << "\n";
  os << "min_frames_per_token = " << task.min_frames_per_token << "\n";
  os << "max_frames_per_token = " << task.max_frames_per_token << "\n";
  os << "noise_std = " << task.noise_std << "\n";
  os << "min_template_dist = " << task.min_template_dist << "\n";
  os << "train_utts = " << task.train_utts << "\n";
  os << "val_utts = " << task.val_utts << "\n";
  os << "template_seed = " << task.template_seed << "\n";
  os << "train_seed = " << task.train_seed << "\n";
  os << "val_seed = " << task.val_seed << "\n";
  os << "\n[train]\n";
  os << "peak_lr = " << peak_lr << "\n";
  os << "warmup_steps = " << warmup_steps << "\n";
  os << "epochs = " << epochs << "\n";
  os << "batch_frames = " << batch_frames << "\n";
  os << "seed = " << seed << "\n";
  os << "clip_norm = " << clip_norm << "\n";
  os << "weight_decay = " << weight_decay << "\n";
  os << "log_every = " << log_every << "\n";
  os << "\n[specaug]\n";
  os << "n_time_masks = " << specaug.n_time_masks << "\n";
  os << "max_time_width = " << specaug.max_time_width << "\n";
  os << "n_freq_masks = " << specaug.n_freq_masks << "\n";
  os << "max_freq_width = " << specaug.max_freq_width << "\n";
  return os.str();
}

std::string TrainConfig::digest() const {
  const std::string text = canonical();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace branchkit::harness
