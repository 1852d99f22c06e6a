#include "m2dclap/config.hpp"

#include "m2dclap/parallel.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace m2dclap {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("config: cannot format number");
  return {buf, end};
}

std::string fmt(long v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw Error("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

long to_long(const std::string& key, const std::string& v) {
  long out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) {
    throw Error("config: " + key + " expects an integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("config: " + key + " expects true or false, got '" + v + "'");
}

std::vector<uint64_t> to_seeds(const std::string& key, const std::string& v) {
  std::vector<uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<uint64_t>(to_long(key, item)));
  }
  return out;
}

std::string from_seeds(const std::vector<uint64_t>& seeds) {
  std::string out;
  for (size_t i = 0; i < seeds.size(); ++i) out += (i ? "," : "") + std::to_string(seeds[i]);
  return out;
}

struct Key {
  const char* name;
  const char* doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define M2DC_NUM(NAME, DOC, FIELD)                                           \
  Key {                                                                      \
    NAME, DOC, [](const RunConfig& c) { return fmt(c.FIELD); },              \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_double(NAME, v); } \
  }
#define M2DC_INT(NAME, DOC, FIELD)                                                    \
  Key {                                                                               \
    NAME, DOC, [](const RunConfig& c) { return fmt(static_cast<long>(c.FIELD)); },    \
        [](RunConfig& c, const std::string& v) { c.FIELD = static_cast<decltype(c.FIELD)>(to_long(NAME, v)); } \
  }
#define M2DC_BOOL(NAME, DOC, FIELD)                                      \
  Key {                                                                  \
    NAME, DOC, [](const RunConfig& c) { return fmt(c.FIELD); },          \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(NAME, v); } \
  }
#define M2DC_STR(NAME, DOC, FIELD)                              \
  Key {                                                         \
    NAME, DOC, [](const RunConfig& c) { return c.FIELD; },      \
        [](RunConfig& c, const std::string& v) { c.FIELD = v; } \
  }

const std::vector<Key>& key_table() {
  static const std::vector<Key> table = {
      M2DC_INT("model.depth", "encoder transformer blocks", model.encoder.depth),
      M2DC_INT("model.dim", "encoder width D", model.encoder.dim),
      M2DC_INT("model.heads", "encoder attention heads", model.encoder.heads),
      M2DC_NUM("model.mlp_ratio", "encoder MLP hidden width / D", model.encoder.mlp_ratio),
      M2DC_INT("model.patch_freq", "patch height in mel bins", model.encoder.patch.freq),
      M2DC_INT("model.patch_time", "patch width in frames", model.encoder.patch.time),
      M2DC_INT("model.predictor_depth", "predictor transformer blocks", model.predictor_depth),
      M2DC_INT("model.predictor_dim", "predictor width", model.predictor_dim),
      M2DC_INT("model.predictor_heads", "predictor attention heads", model.predictor_heads),
      M2DC_BOOL("model.predictor_posenc", "re-add positional encoding at the predictor input", model.predictor_posenc),
      M2DC_INT("model.projector_hidden", "audio projector hidden width", model.projector_hidden),
      M2DC_INT("model.semantic_dim", "shared audio-text embedding size d_s", model.semantic_dim),
      M2DC_NUM("model.ln_eps", "layer norm epsilon", model.ln_eps),
      M2DC_NUM("model.init_temperature", "initial contrastive temperature", model.init_temperature),

      M2DC_INT("audio.sample_rate", "input sample rate in Hz (WAVs must match)", mel.sample_rate_hz),
      M2DC_INT("audio.n_mels", "mel bins", mel.n_mels),
      M2DC_NUM("audio.fmin", "lowest mel edge in Hz", mel.fmin_hz),
      M2DC_NUM("audio.fmax", "highest mel edge in Hz", mel.fmax_hz),
      M2DC_NUM("audio.window_s", "STFT window length in seconds", mel.window_s),
      M2DC_NUM("audio.hop_s", "STFT hop in seconds", mel.hop_s),
      M2DC_INT("audio.n_fft", "FFT size (power of two)", mel.n_fft),
      M2DC_NUM("audio.crop_seconds", "pre-training random crop duration", crop_seconds),
      M2DC_NUM("audio.norm_mean", "log-mel standardization mean", norm_mean),
      M2DC_NUM("audio.norm_std", "log-mel standardization std", norm_std),

      M2DC_NUM("pretrain.mask_ratio", "fraction of patches masked", mask_ratio),
      M2DC_NUM("pretrain.lambda_m2d", "weight of the masked prediction loss", weights.m2d),
      M2DC_NUM("pretrain.lambda_clap", "weight of the audio-text contrastive loss", weights.clap),
      M2DC_INT("pretrain.batch_size", "clips per step", batch_size),
      M2DC_INT("pretrain.epochs", "passes over the training manifest", epochs),
      Key{"pretrain.optimizer", "adamw | sgd",
          [](const RunConfig& c) { return std::string(optim::to_string(c.optimizer.kind)); },
          [](RunConfig& c, const std::string& v) { c.optimizer.kind = optim::parse_kind(v); }},
      M2DC_NUM("pretrain.lr", "peak learning rate", optimizer.lr),
      M2DC_NUM("pretrain.momentum", "SGD momentum or Adam beta1", optimizer.momentum),
      M2DC_NUM("pretrain.beta2", "Adam beta2", optimizer.beta2),
      M2DC_NUM("pretrain.eps", "Adam epsilon", optimizer.eps),
      M2DC_NUM("pretrain.weight_decay", "decoupled weight decay (matrices only)", optimizer.weight_decay),
      M2DC_NUM("pretrain.warmup_epochs", "linear learning-rate warm-up", optimizer.warmup_epochs),
      M2DC_BOOL("pretrain.cosine", "cosine decay after warm-up", optimizer.cosine),
      M2DC_NUM("pretrain.ema_start", "target EMA decay at step 0", ema.start),
      M2DC_NUM("pretrain.ema_end", "target EMA decay after the ramp", ema.end),
      M2DC_INT("pretrain.ema_ramp_steps", "steps of the linear EMA decay ramp", ema.ramp_steps),
      Key{"pretrain.target_norm", "token | batch_feature",
          [](const RunConfig& c) { return std::string(m2d::to_string(c.target_norm)); },
          [](RunConfig& c, const std::string& v) { c.target_norm = m2d::parse_target_norm(v); }},

      M2DC_STR("data.train_manifest", "training manifest (TSV)", train_manifest),
      M2DC_STR("data.test_manifest", "held-out manifest (TSV)", test_manifest),
      M2DC_STR("data.embedding_table", "caption embedding table (binary)", embedding_table),
      M2DC_BOOL("data.toy_embed_fallback", "embed captions missing from the table with the toy embedder",
                toy_embed_fallback),

      M2DC_STR("finetune.profile", "as2m | as20k | esc50 | spcv2 | vc1", finetune_profile),
      M2DC_NUM("finetune.lr", "learning rate override (0 = profile)", finetune_lr),
      M2DC_INT("finetune.epochs", "epoch override (0 = profile)", finetune_epochs),
      M2DC_INT("finetune.batch_size", "batch override (0 = profile)", finetune_batch_size),
      M2DC_INT("finetune.warmup_epochs", "warm-up override (-1 = profile)", finetune_warmup_epochs),
      M2DC_STR("finetune.optimizer", "optimizer override (empty = profile)", finetune_optimizer),

      Key{"linear.pooling", "mean | freq_stack",
          [](const RunConfig& c) { return std::string(linear::to_string(c.pooling)); },
          [](RunConfig& c, const std::string& v) { c.pooling = linear::parse_pooling(v); }},
      Key{"linear.seeds", "comma-separated probe seeds (at least 3)",
          [](const RunConfig& c) { return from_seeds(c.probe_seeds); },
          [](RunConfig& c, const std::string& v) { c.probe_seeds = to_seeds("linear.seeds", v); }},
      M2DC_INT("linear.max_epochs", "probe epoch cap", probe.max_epochs),
      M2DC_NUM("linear.tolerance", "probe early stop on epoch loss change", probe.tolerance),
      M2DC_NUM("linear.lr", "probe SGD learning rate", probe.lr),
      M2DC_NUM("linear.momentum", "probe SGD momentum", probe.momentum),
      M2DC_NUM("linear.weight_decay", "probe L2 penalty", probe.weight_decay),
      M2DC_INT("linear.batch_size", "probe minibatch", probe.batch_size),
      M2DC_NUM("linear.validation_fraction", "share of training clips held out for model selection",
               probe.validation_fraction),

      M2DC_STR("zeroshot.task", "caption rule set used to build class prompts", zeroshot_task),
      M2DC_STR("zeroshot.caption_rules", "optional rule file overriding the built-in rules", caption_rules),

      M2DC_INT("run.seed", "master seed", seed),
      M2DC_INT("run.threads", "worker threads (0 = all cores)", threads),
  };
  return table;
}

#undef M2DC_NUM
#undef M2DC_INT
#undef M2DC_BOOL
#undef M2DC_STR

const Key& find_key(const std::string& name) {
  for (const auto& k : key_table()) {
    if (name == k.name) return k;
  }
  throw Error("config: unknown key '" + name + "'");
}

}  // namespace

RunConfig RunConfig::desk() {
  RunConfig c;
  c.model.semantic_dim = 128;
  c.crop_seconds = 2.0;
  c.batch_size = 64;
  c.epochs = 20;
  c.optimizer.kind = optim::Kind::AdamW;
  c.optimizer.lr = 1e-3;
  c.optimizer.momentum = 0.9;
  c.optimizer.beta2 = 0.95;
  c.optimizer.weight_decay = 0.05;
  c.optimizer.warmup_epochs = 2.0;
  c.optimizer.cosine = true;
  c.ema = {0.99, 0.999, 200};
  return c;
}

RunConfig RunConfig::full_scale() {
  RunConfig c;
  c.model = ModelConfig::vit_base();
  c.crop_seconds = 6.0;
  c.batch_size = 2048;
  c.epochs = 300;
  c.optimizer.kind = optim::Kind::AdamW;
  c.optimizer.lr = 3e-4 * 2048 / 256;
  c.optimizer.momentum = 0.9;
  c.optimizer.beta2 = 0.95;
  c.optimizer.weight_decay = 0.05;
  c.optimizer.warmup_epochs = 20.0;
  c.optimizer.cosine = true;
  c.ema = {0.99995, 0.99999, 292800};  // ~2M clips / 2048 x 300 epochs
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) { find_key(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(*this); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : key_table()) out.emplace_back(k.name);
  return out;
}

void RunConfig::validate() const {
  model.validate();
  weights.validate();
  if (mel.sample_rate_hz != audio::kSampleRate) throw Error("config: audio.sample_rate must be 16000");
  if (mel.n_mels % model.encoder.patch.freq != 0) {
    throw Error("config: audio.n_mels must be a multiple of model.patch_freq");
  }
  if (mel.n_fft < mel.win_length() || (mel.n_fft & (mel.n_fft - 1)) != 0) {
    throw Error("config: audio.n_fft must be a power of two no shorter than the window");
  }
  if (!(mel.fmin_hz >= 0.0 && mel.fmin_hz < mel.fmax_hz && mel.fmax_hz <= mel.sample_rate_hz / 2.0)) {
    throw Error("config: need 0 <= audio.fmin < audio.fmax <= sample_rate / 2");
  }
  if (!(crop_seconds > 0.0)) throw Error("config: audio.crop_seconds must be > 0");
  if (!(norm_std > 0.0)) throw Error("config: audio.norm_std must be > 0");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw Error("config: pretrain.mask_ratio must be in [0, 1)");
  if (batch_size < 1) throw Error("config: pretrain.batch_size must be >= 1");
  if (epochs < 1) throw Error("config: pretrain.epochs must be >= 1");
  if (!(optimizer.lr > 0.0)) throw Error("config: pretrain.lr must be > 0");
  if (optimizer.warmup_epochs < 0.0) throw Error("config: pretrain.warmup_epochs must be >= 0");
  if (!(ema.start >= 0.0 && ema.start <= 1.0 && ema.end >= 0.0 && ema.end <= 1.0)) {
    throw Error("config: EMA decay must be in [0, 1]");
  }
  if (probe_seeds.size() < 3) throw Error("config: linear.seeds needs at least 3 seeds");
  if (threads < 0) throw Error("config: run.threads must be >= 0");
}

std::string RunConfig::serialize(bool documented) const {
  std::ostringstream os;
  std::string section;
  for (const auto& k : key_table()) {
    const std::string name = k.name;
    const std::string head = name.substr(0, name.find('.'));
    if (documented && head != section) {
      if (!section.empty()) os << "\n";
      os << "# [" << head << "]\n";
      section = head;
    }
    if (documented) os << "# " << k.doc << "\n";
    os << name << " = " << k.get(*this) << "\n";
  }
  return os.str();
}

RunConfig RunConfig::parse(const std::string& text, RunConfig base) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      base.set(trim(line.substr(0, eq)), unquote(trim(line.substr(eq + 1))));
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = parse(ss.str());
  const auto dir = path.parent_path();
  for (std::string* p : {&c.train_manifest, &c.test_manifest, &c.embedding_table, &c.caption_rules}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (dir / *p).lexically_normal().string();
  }
  return c;
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write config " + path.string());
  out << serialize(true);
}

void RunConfig::apply_overrides(const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + o + "'");
    set(trim(o.substr(0, eq)), unquote(trim(o.substr(eq + 1))));
  }
}

uint64_t RunConfig::hash() const { return fnv1a64(serialize(false)); }

int RunConfig::resolved_threads() const { return threads > 0 ? threads : default_threads(); }

}  // namespace m2dclap
