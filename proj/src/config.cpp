#include "more/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "more/errors.hpp"

namespace more {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw SchemaError("bad value for " + key + ": '" + v + "'");
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
ConfigField number(std::string section, std::string key, std::string doc, T& ref) {
  const std::string name = section + "." + key;
  ConfigField f{std::move(section), std::move(key), std::move(doc), {}, {}};
  if constexpr (std::is_floating_point_v<T>) {
    f.get = [&ref] { return format_double(ref); };
  } else {
    f.get = [&ref] { return std::to_string(ref); };
  }
  f.set = [&ref, name](const std::string& v) { ref = parse_number<T>(name, v); };
  return f;
}

ConfigField flag(std::string section, std::string key, std::string doc, bool& ref) {
  const std::string name = section + "." + key;
  return {std::move(section), std::move(key), std::move(doc), [&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, name](const std::string& v) {
            if (v == "true") ref = true;
            else if (v == "false") ref = false;
            else throw SchemaError("bad value for " + name + ": expected true or false");
          }};
}

ConfigField text(std::string section, std::string key, std::string doc, std::string& ref) {
  return {std::move(section), std::move(key), std::move(doc), [&ref] { return ref; },
          [&ref](const std::string& v) { ref = v; }};
}

template <typename E>
ConfigField choice(std::string section, std::string key, std::string doc, E& ref, E (*parse)(const std::string&),
                   std::string (*show)(E)) {
  const std::string name = section + "." + key;
  return {std::move(section), std::move(key), std::move(doc), [&ref, show] { return show(ref); },
          [&ref, parse, name](const std::string& v) {
            try {
              ref = parse(v);
            } catch (const ParameterError& e) {
              throw SchemaError("bad value for " + name + ": " + e.what());
            }
          }};
}

void vit_fields(std::vector<ConfigField>& out, const std::string& enc, VitConfig& v) {
  out.push_back(number("model", enc + ".depth", "transformer blocks", v.depth));
  out.push_back(number("model", enc + ".heads", "attention heads", v.heads));
  out.push_back(number("model", enc + ".dim", "token width", v.dim));
  out.push_back(number("model", enc + ".mlp_ratio", "MLP hidden width / dim", v.mlp_ratio));
  out.push_back(number("model", enc + ".dropkey_first", "DropKey rate of the first block", v.dropkey_rate_first));
  out.push_back(number("model", enc + ".dropkey_last", "DropKey rate of the last block", v.dropkey_rate_last));
}

}  // namespace

std::vector<ConfigField> config_fields(RunConfig& c) {
  std::vector<ConfigField> f;
  f.push_back(text("data", "manifest", "manifest TSV, relative to the config file", c.data.manifest));
  f.push_back(flag("data", "prepared", "payloads already preprocessed", c.data.prepared));
  f.push_back(number("data", "test_fraction", "per-class fraction held out from pretraining", c.data.test_fraction));
  f.push_back(number("data", "split_seed", "seed of the held-out split", c.data.split_seed));

  f.push_back(number("model", "image_size", "x-ray side length in pixels", c.model.image_size));
  f.push_back(number("model", "ecg_length", "ECG samples per lead", c.model.ecg_length));
  vit_fields(f, "image", c.model.image);
  vit_fields(f, "ecg", c.model.ecg);
  vit_fields(f, "text", c.model.text);
  f.push_back(flag("model", "text_lora", "LoRA adapters on text q/k/v", c.model.text_lora));
  f.push_back(number("model", "lora.rank", "adapter rank", c.model.lora.rank));
  f.push_back(number("model", "lora.alpha", "adapter scale numerator", c.model.lora.alpha));
  f.push_back(flag("model", "lora.freeze_base", "freeze non-adapter text weights", c.model.lora.freeze_base));
  f.push_back(number("model", "text_max_length", "token limit of the joined reports", c.model.text_max_length));
  f.push_back(number("model", "proj_hidden", "projection head hidden width", c.model.proj_hidden));
  f.push_back(number("model", "proj_dim", "shared embedding width", c.model.proj_dim));
  f.push_back(number("model", "tau_init", "initial temperature", c.model.tau_init));

  auto& t = c.train;
  f.push_back(number("train", "lr", "pretraining learning rate", t.lr));
  f.push_back(number("train", "weight_decay", "pretraining decoupled weight decay", t.weight_decay));
  f.push_back(number("train", "accumulation_steps", "micro-batches per optimizer step", t.accumulation_steps));
  f.push_back(number("train", "batch_size", "micro-batch size", t.batch_size));
  f.push_back(number("train", "max_epochs", "epoch limit", t.max_epochs));
  f.push_back(number("train", "patience", "epochs without validation improvement before stopping", t.patience));
  f.push_back(number("train", "seed", "training seed", t.seed));
  f.push_back(number("train", "val_fraction", "subject-level validation fraction", t.val_fraction));
  f.push_back(flag("train", "augment", "augment images and ECGs", t.augment));
  f.push_back(number("train", "sentence_prob", "chance a text is one sentence of the x-ray note", t.sentence_prob));
  auto& a = t.augment_cfg;
  f.push_back(number("train", "augment.scale_min", "smallest crop area fraction", a.scale_min));
  f.push_back(number("train", "augment.scale_max", "largest crop area fraction", a.scale_max));
  f.push_back(number("train", "augment.scale_prob", "crop probability", a.scale_prob));
  f.push_back(number("train", "augment.jitter_max", "brightness/contrast jitter", a.jitter_max));
  f.push_back(number("train", "augment.jitter_prob", "jitter probability", a.jitter_prob));
  f.push_back(number("train", "augment.blur_kernel_min", "smallest blur kernel", a.blur_kernel_min));
  f.push_back(number("train", "augment.blur_kernel_max", "largest blur kernel", a.blur_kernel_max));
  f.push_back(number("train", "augment.blur_prob", "blur probability", a.blur_prob));
  f.push_back(number("train", "augment.warp_segments", "ECG time-warp segments", a.warp_segments));
  f.push_back(number("train", "augment.warp_factor", "ECG time-warp stretch", a.warp_factor));
  f.push_back(number("train", "augment.warp_prob", "ECG time-warp probability", a.warp_prob));
  f.push_back(number("train", "augment.permute_segments", "ECG permutation segments", a.permute_segments));
  f.push_back(number("train", "augment.permute_prob", "ECG permutation probability", a.permute_prob));

  auto& ft = c.finetune;
  f.push_back(choice("train", "finetune.mode", "linear_probe or last_k_qkv", ft.mode, &parse_finetune_mode,
                     static_cast<std::string (*)(FinetuneMode)>(&to_string)));
  f.push_back(number("train", "finetune.k", "blocks whose q/k/v train under last_k_qkv", ft.k_last_layers));
  f.push_back(choice("train", "finetune.branch", "image or ecg", ft.branch, &parse_branch,
                     static_cast<std::string (*)(Branch)>(&to_string)));
  f.push_back(choice("train", "finetune.labels", "multilabel or multiclass", ft.labels, &parse_label_mode,
                     static_cast<std::string (*)(LabelMode)>(&to_string)));
  f.push_back(number("train", "finetune.lr", "fine-tuning learning rate", ft.lr));
  f.push_back(number("train", "finetune.weight_decay", "fine-tuning weight decay", ft.weight_decay));
  f.push_back(number("train", "finetune.batch_size", "fine-tuning batch size", ft.batch_size));
  f.push_back(number("train", "finetune.epochs", "fine-tuning epochs", ft.epochs));
  f.push_back(number("train", "finetune.seed", "fine-tuning seed", ft.seed));

  f.push_back(number("eval", "batch_size", "embedding batch size", c.eval.batch_size));
  f.push_back(number("eval", "top_k", "k of precision@k and retrieval", c.eval.top_k));
  f.push_back(number("eval", "fusion_weight", "x-ray weight of fused scores", c.eval.fusion_weight));
  f.push_back(number("eval", "max_gap_days", "largest x-ray/ECG gap for fused scores", c.eval.max_gap_days));
  return f;
}

void RunConfig::validate() const {
  try {
    ModelConfig m = model;
    m.vocab_size = std::max<Index>(m.vocab_size, 5);
    m.validate();
    train.validate();
    train.augment_cfg.validate();
    finetune.validate();
  } catch (const ParameterError& e) {
    throw SchemaError(e.what());
  }
  if (!(data.test_fraction >= 0 && data.test_fraction < 1)) throw SchemaError("data.test_fraction must be in [0,1)");
  if (eval.batch_size < 1 || eval.top_k < 1) throw SchemaError("eval.batch_size and eval.top_k must be positive");
  if (!(eval.fusion_weight >= 0 && eval.fusion_weight <= 1)) throw SchemaError("eval.fusion_weight must be in [0,1]");
  if (eval.max_gap_days < 0) throw SchemaError("eval.max_gap_days must be non-negative");
}

std::string RunConfig::serialize() const {
  RunConfig copy = *this;
  std::ostringstream os;
  std::string section;
  for (const auto& f : config_fields(copy)) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get() << '\n';
  }
  return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  auto fields = config_fields(cfg);
  std::set<std::string> sections, seen;
  for (const auto& f : fields) sections.insert(f.section);

  std::istringstream is(text);
  std::string raw, section;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw SchemaError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!sections.contains(section)) throw SchemaError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw SchemaError(where + "expected key = value");
    if (section.empty()) throw SchemaError(where + "key outside any section");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const std::string full = section + "." + key;
    auto it = std::find_if(fields.begin(), fields.end(),
                           [&](const ConfigField& f) { return f.section == section && f.key == key; });
    if (it == fields.end()) throw SchemaError(where + "unknown key " + full);
    if (!seen.insert(full).second) throw SchemaError(where + "duplicate key " + full);
    try {
      it->set(value);
    } catch (const SchemaError& e) {
      throw SchemaError(where + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingFileError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string describe_config_schema() {
  RunConfig defaults;
  std::ostringstream os;
  std::string section;
  for (const auto& f : config_fields(defaults)) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << "# " << f.doc << '\n' << f.key << " = " << f.get() << '\n';
  }
  return os.str();
}

}  // namespace more
