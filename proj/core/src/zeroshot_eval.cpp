#include "m2dclap/zeroshot_eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace m2dclap::zeroshot {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string apply_template(const std::string& templ, const std::string& label) {
  const auto pos = templ.find("{label}");
  if (pos == std::string::npos) throw Error("caption template lacks {label}: " + templ);
  return templ.substr(0, pos) + label + templ.substr(pos + 7);
}

}  // namespace

std::string CaptionRuleSet::normalize(const std::string& task) {
  std::string out;
  for (unsigned char c : task) {
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

CaptionRuleSet CaptionRuleSet::defaults() {
  CaptionRuleSet s;
  const CaptionRule heard{"{label} can be heard", {}, false};
  for (const char* t : {"as", "audioset", "fsd", "fsd50k", "esc50", "us8k", "synthetic"}) s.rules_[t] = heard;
  s.rules_["gtzan"] = {"{label} music can be heard", {}, false};
  s.rules_["nsynth"] = {"the musical instrument sound of {label} can be heard", {}, false};
  CaptionRule crema{"{label} can be heard", {}, true};
  crema.phrases = {
      {"angry", "angry person talking"},
      {"disgust", "someone talking in disgust"},
      {"fear", "someone talking with a sense of fear"},
      {"happy", "someone talking happily and joyfully"},
      {"neutral", "someone talking calmly"},
      {"sad", "someone talking sadly"},
  };
  s.rules_["cremad"] = crema;
  return s;
}

CaptionRuleSet CaptionRuleSet::load(const std::filesystem::path& path, bool start_from_defaults) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open caption rule file: " + path.string());
  CaptionRuleSet s = start_from_defaults ? defaults() : CaptionRuleSet{};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      if (value.find("{label}") == std::string::npos) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": template lacks {label}");
      }
      s.rules_[normalize(key)].templ = value;
    } else {
      auto& rule = s.rules_[normalize(key.substr(0, dot))];
      rule.phrases[key.substr(dot + 1)] = value;
      rule.closed = true;
    }
  }
  return s;
}

void CaptionRuleSet::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write caption rule file: " + path.string());
  out << "# task = template ({label} is replaced); task.label = phrase\n";
  for (const auto& [task, rule] : rules_) {
    out << task << " = " << rule.templ << "\n";
    for (const auto& [label, phrase] : rule.phrases) out << task << "." << label << " = " << phrase << "\n";
  }
}

bool CaptionRuleSet::has_task(const std::string& task) const { return rules_.count(normalize(task)) != 0; }

std::string CaptionRuleSet::caption(const std::string& task, const std::string& label) const {
  auto it = rules_.find(normalize(task));
  if (it == rules_.end()) throw Error("no caption rule for task '" + task + "'");
  const CaptionRule& rule = it->second;
  auto ph = rule.phrases.find(label);
  if (ph != rule.phrases.end()) return apply_template(rule.templ, ph->second);
  if (rule.closed) throw Error("task '" + task + "' has no caption for label '" + label + "'");
  if (label.empty()) throw Error("empty label for task '" + task + "'");
  return apply_template(rule.templ, label);
}

std::string label_to_caption(const std::string& task, const std::string& label, const CaptionRuleSet& rules) {
  return rules.caption(task, label);
}

std::vector<ZsPrediction> zs_classify(const Matrix& audio, const Matrix& classes) {
  if (classes.rows() < 2) throw Error("zs_classify: need at least two classes");
  if (audio.cols() != classes.cols()) throw ShapeError("zs_classify: embedding dimensions differ");
  const Matrix a = l2_normalize_rows(audio, "zs_classify(audio)");
  const Matrix c = l2_normalize_rows(classes, "zs_classify(class)");
  const Matrix scores = a * c.transpose();
  std::vector<ZsPrediction> out(static_cast<size_t>(audio.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    auto& p = out[static_cast<size_t>(i)];
    p.scores = scores.row(i);
    p.label = 0;
    for (Eigen::Index k = 1; k < scores.cols(); ++k) {
      if (scores(i, k) > scores(i, p.label)) p.label = static_cast<int>(k);
    }
  }
  return out;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& truths) {
  if (preds.size() != truths.size()) throw ShapeError("accuracy: length mismatch");
  if (preds.empty()) throw Error("accuracy: empty evaluation set");
  size_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) correct += preds[i] == truths[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double average_precision(const Vector& scores, const std::vector<bool>& positive) {
  if (static_cast<size_t>(scores.size()) != positive.size()) throw ShapeError("average_precision: length mismatch");
  const auto n_pos = std::count(positive.begin(), positive.end(), true);
  if (n_pos == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<Eigen::Index> order(static_cast<size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  // Walk tie groups: all members of a group share the precision at its end.
  double ap = 0.0;
  size_t seen = 0, seen_pos = 0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    size_t group_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_pos += positive[static_cast<size_t>(order[j])] ? 1 : 0;
      ++j;
    }
    seen += j - i;
    seen_pos += group_pos;
    ap += static_cast<double>(group_pos) * static_cast<double>(seen_pos) / static_cast<double>(seen);
    i = j;
  }
  return ap / static_cast<double>(n_pos);
}

MapResult mean_ap(const Matrix& scores, const Matrix& truth) {
  if (scores.rows() != truth.rows() || scores.cols() != truth.cols()) throw ShapeError("mean_ap: shape mismatch");
  if (scores.rows() == 0) throw Error("mean_ap: empty evaluation set");
  MapResult r;
  double sum = 0.0;
  for (Eigen::Index k = 0; k < scores.cols(); ++k) {
    std::vector<bool> pos(static_cast<size_t>(scores.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) pos[static_cast<size_t>(i)] = truth(i, k) != 0.0;
    const double ap = average_precision(scores.col(k), pos);
    if (std::isnan(ap)) {
      ++r.classes_without_positives;
      continue;
    }
    sum += ap;
    ++r.classes_scored;
  }
  if (r.classes_scored == 0) throw Error("mean_ap: no class has a positive example");
  r.map = sum / r.classes_scored;
  return r;
}

}  // namespace m2dclap::zeroshot
