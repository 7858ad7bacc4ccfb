#include "more/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include "more/errors.hpp"
#include "more/io.hpp"

namespace more {

namespace fs = std::filesystem;

int TripleSample::class_id() const {
  int found = -1;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 1) {
      if (found >= 0) return -1;
      found = static_cast<int>(i);
    }
  return found;
}

std::vector<TripleSample> match_pairs(const std::vector<StudyRecord>& xrays, const std::vector<StudyRecord>& ecgs,
                                      int max_gap_days) {
  std::map<std::string, std::vector<const StudyRecord*>> xs, es;
  for (const auto& r : xrays) xs[r.subject_id].push_back(&r);
  for (const auto& r : ecgs) es[r.subject_id].push_back(&r);
  auto by_study = [](const StudyRecord* a, const StudyRecord* b) { return a->study_id < b->study_id; };

  std::vector<TripleSample> out;
  for (auto& [subject, xlist] : xs) {
    const auto it = es.find(subject);
    if (it == es.end()) continue;
    auto elist = it->second;
    std::stable_sort(xlist.begin(), xlist.end(), by_study);
    std::stable_sort(elist.begin(), elist.end(), by_study);
    for (const StudyRecord* x : xlist)
      for (const StudyRecord* e : elist) {
        const double gap = std::abs(x->study_date - e->study_date);
        if (gap > max_gap_days) continue;
        TripleSample s;
        s.subject_id = subject;
        s.study_id_x = x->study_id;
        s.study_id_e = e->study_id;
        s.image_path = x->path;
        s.ecg_path = e->path;
        s.xray_note = x->note.value_or("");
        s.ecg_note = e->note.value_or("");
        if (x->labels) s.labels = *x->labels;
        s.gap_days = static_cast<int>(std::lround(gap));
        out.push_back(std::move(s));
      }
  }
  return out;
}

const std::vector<std::string>& canonical_label_order() {
  static const std::vector<std::string> order = {
      "No Finding",   "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity", "Lung Lesion",
      "Edema",        "Consolidation",              "Pneumonia",    "Atelectasis",  "Pneumothorax",
      "Pleural Effusion", "Pleural Other",          "Fracture",     "Support Devices"};
  return order;
}

std::string synthesize_note(const std::vector<std::pair<std::string, int>>& labels) {
  const auto& order = canonical_label_order();
  auto rank = [&](const std::string& name) {
    const auto it = std::find(order.begin(), order.end(), name);
    return static_cast<std::size_t>(it - order.begin());
  };
  auto sorted = labels;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [&](const auto& a, const auto& b) { return rank(a.first) < rank(b.first); });
  std::string note;
  for (const auto& [name, value] : sorted) {
    if (value == 0) continue;
    if (value != 1 && value != -1) throw ParameterError("label values must be 1, 0 or -1");
    if (!note.empty()) note += ", ";
    note += (value == 1 ? "Finding of " : "Uncertain Finding of ") + name;
  }
  if (note.empty()) throw ParameterError("cannot synthesize a note from all-zero labels");
  return note;
}

namespace {

std::string sanitize(const std::string& text) {
  static const std::string kKeep = ".,;:!?'\"()-/%";
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    const bool keep = std::isalnum(c) || kKeep.find(ch) != std::string::npos;
    if (!keep) {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out += ' ';
    pending_space = false;
    out += ch;
  }
  return out;
}

std::string xray_sections(const std::string& raw) {
  static const std::regex heading(
      R"((CLINICAL HISTORY|REASON FOR EXAM|RECOMMENDATIONS?|NOTIFICATION|EXAMINATION|INDICATION|COMPARISON|IMPRESSION|TECHNIQUE|FINDINGS?|HISTORY)\s*:)",
      std::regex::icase);
  std::vector<std::pair<std::string, std::size_t>> marks;  // heading, body start
  std::vector<std::size_t> starts;
  for (auto it = std::sregex_iterator(raw.begin(), raw.end(), heading); it != std::sregex_iterator(); ++it) {
    std::string name = (*it)[1].str();
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::toupper(c); });
    marks.emplace_back(name, static_cast<std::size_t>(it->position() + it->length()));
    starts.push_back(static_cast<std::size_t>(it->position()));
  }
  if (marks.empty()) return raw;
  std::string kept;
  for (std::size_t i = 0; i < marks.size(); ++i) {
    const auto& [name, begin] = marks[i];
    if (name != "FINDINGS" && name != "FINDING" && name != "IMPRESSION") continue;
    const std::size_t end = i + 1 < marks.size() ? starts[i + 1] : raw.size();
    kept += raw.substr(begin, end - begin);
    kept += ' ';
  }
  return kept;
}

std::string ecg_fields(const std::string& raw) {
  std::string kept;
  std::stringstream in(raw);
  std::string field;
  for (int i = 0; i < 7 && std::getline(in, field, '|'); ++i) {
    kept += field;
    kept += ' ';
  }
  return kept;
}

}  // namespace

std::string clean_report(const std::string& raw, Modality modality) {
  return sanitize(modality == Modality::xray ? xray_sections(raw) : ecg_fields(raw));
}

TripleSample prepare_sample(const TripleSample& raw) {
  TripleSample s = raw;
  s.ecg = ecg_pipeline(raw.ecg);
  s.image = xray_adaptive_hist_eq(raw.image);
  return s;
}

namespace {

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_groups(
    const std::map<std::string, std::vector<std::size_t>>& groups, double fraction, std::uint64_t seed,
    bool per_group) {
  if (!(fraction >= 0 && fraction <= 1)) throw ParameterError("split fraction must be in [0,1]");
  std::vector<std::size_t> train, held;
  Rng rng(seed);
  if (per_group) {
    for (const auto& [key, members] : groups) {
      const auto order = rng.permutation(static_cast<int>(members.size()));
      const auto n_held = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(members.size())));
      for (std::size_t i = 0; i < members.size(); ++i)
        (i < n_held ? held : train).push_back(members[static_cast<std::size_t>(order[i])]);
    }
  } else {
    std::vector<const std::vector<std::size_t>*> list;
    for (const auto& [key, members] : groups) list.push_back(&members);
    const auto order = rng.permutation(static_cast<int>(list.size()));
    const auto n_held = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(list.size())));
    for (std::size_t i = 0; i < list.size(); ++i)
      for (std::size_t m : *list[static_cast<std::size_t>(order[i])]) (i < n_held ? held : train).push_back(m);
  }
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());
  return {train, held};
}

}  // namespace

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const Dataset& data, double fraction,
                                                                               std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    std::string key;
    for (int v : data.samples[i].labels) key += std::to_string(v) + ",";
    groups[key].push_back(i);
  }
  return split_groups(groups, fraction, seed, true);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> subject_split(const Dataset& data, double fraction,
                                                                            std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.samples.size(); ++i) groups[data.samples[i].subject_id].push_back(i);
  return split_groups(groups, fraction, seed, false);
}

// --- Manifest --------------------------------------------------------------

namespace {

const std::vector<std::string> kColumns = {"subject_id", "study_id_x", "study_id_e", "image_path", "ecg_path",
                                           "xray_note",  "ecg_note",   "labels",     "gap_days"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\')
      out += "\\\\";
    else if (c == '\t')
      out += "\\t";
    else if (c == '\n')
      out += "\\n";
    else
      out += c;
  }
  return out;
}

std::string unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw SchemaError("manifest: dangling escape");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      default: throw SchemaError(std::string("manifest: unknown escape \\") + s[i]);
    }
  }
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t begin = 0;
  for (;;) {
    const auto tab = line.find('\t', begin);
    out.push_back(line.substr(begin, tab - begin));
    if (tab == std::string::npos) break;
    begin = tab + 1;
  }
  return out;
}

}  // namespace

void write_manifest(const fs::path& path, const Dataset& data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFileError("cannot write " + path.string());
  for (std::size_t i = 0; i < kColumns.size(); ++i) out << (i ? "\t" : "") << kColumns[i];
  out << '\n';
  for (const auto& s : data.samples) {
    if (s.labels.size() != data.class_names.size()) throw SchemaError("label vector does not match class names");
    std::string labels;
    for (std::size_t k = 0; k < s.labels.size(); ++k)
      labels += (k ? ";" : "") + data.class_names[k] + ":" + std::to_string(s.labels[k]);
    out << escape(s.subject_id) << '\t' << escape(s.study_id_x) << '\t' << escape(s.study_id_e) << '\t'
        << escape(s.image_path) << '\t' << escape(s.ecg_path) << '\t' << escape(s.xray_note) << '\t'
        << escape(s.ecg_note) << '\t' << escape(labels) << '\t' << s.gap_days << '\n';
  }
}

Dataset read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || split_tabs(line) != kColumns)
    throw SchemaError(path.string() + ": manifest header does not match the expected columns");
  Dataset data;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    const std::string where = path.string() + ":" + std::to_string(row);
    if (f.size() != kColumns.size()) throw SchemaError(where + ": expected 9 columns");
    TripleSample s;
    s.subject_id = unescape(f[0]);
    s.study_id_x = unescape(f[1]);
    s.study_id_e = unescape(f[2]);
    s.image_path = unescape(f[3]);
    s.ecg_path = unescape(f[4]);
    s.xray_note = unescape(f[5]);
    s.ecg_note = unescape(f[6]);
    std::vector<std::string> names;
    std::stringstream labels(unescape(f[7]));
    std::string item;
    while (std::getline(labels, item, ';')) {
      const auto colon = item.rfind(':');
      if (colon == std::string::npos) throw SchemaError(where + ": label entry without ':'");
      names.push_back(item.substr(0, colon));
      const std::string value = item.substr(colon + 1);
      if (value != "1" && value != "0" && value != "-1") throw SchemaError(where + ": label value must be 1, 0 or -1");
      s.labels.push_back(std::stoi(value));
    }
    if (data.samples.empty())
      data.class_names = names;
    else if (names != data.class_names)
      throw SchemaError(where + ": label names differ from the first row");
    try {
      std::size_t used = 0;
      s.gap_days = std::stoi(f[8], &used);
      if (used != f[8].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw SchemaError(where + ": gap_days is not an integer");
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

void load_payloads(Dataset& data, const fs::path& base_dir) {
  for (auto& s : data.samples) {
    s.image = read_pgm(base_dir / s.image_path);
    s.ecg = read_ecg(base_dir / s.ecg_path);
  }
}

void save_dataset(const fs::path& dir, const Dataset& data) {
  for (const auto& s : data.samples) {
    write_pgm(dir / s.image_path, s.image.pixels);
    write_ecg(dir / s.ecg_path, s.ecg);
  }
  write_manifest(dir / "manifest.tsv", data);
}

Dataset load_dataset(const fs::path& manifest) {
  Dataset data = read_manifest(manifest);
  load_payloads(data, manifest.parent_path());
  return data;
}

}  // namespace more
