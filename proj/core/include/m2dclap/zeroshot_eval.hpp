#pragma once

#include "m2dclap/common.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace m2dclap::zeroshot {

// Per-task label -> caption rule: a template with a "{label}" placeholder and
// an optional explicit label -> phrase map applied before templating.
struct CaptionRule {
  std::string templ = "{label} can be heard";
  std::map<std::string, std::string> phrases;
  // When true, labels missing from `phrases` are rejected.
  bool closed = false;
};

class CaptionRuleSet {
 public:
  // Built-in rules for as, fsd, esc50, us8k, cremad, gtzan, nsynth and the
  // synthetic tone task.
  static CaptionRuleSet defaults();

  // Text file, one rule per line:
  //   <task> = <template containing {label}>
  //   <task>.<label> = <phrase>      (makes the task's label set closed)
  // '#' starts a comment. Entries override the defaults.
  static CaptionRuleSet load(const std::filesystem::path& path, bool start_from_defaults = true);
  void save(const std::filesystem::path& path) const;

  bool has_task(const std::string& task) const;
  std::string caption(const std::string& task, const std::string& label) const;
  void set(const std::string& task, CaptionRule rule) { rules_[normalize(task)] = std::move(rule); }
  const std::map<std::string, CaptionRule>& rules() const { return rules_; }

  static std::string normalize(const std::string& task);

 private:
  std::map<std::string, CaptionRule> rules_;
};

std::string label_to_caption(const std::string& task, const std::string& label,
                             const CaptionRuleSet& rules = CaptionRuleSet::defaults());

struct ZsPrediction {
  RowVector scores;  // cosine similarity per class
  int label = -1;    // argmax, ties to the lowest index
};

// audio: n x d_s, classes: C x d_s (C >= 2).
std::vector<ZsPrediction> zs_classify(const Matrix& audio, const Matrix& classes);

double accuracy(const std::vector<int>& preds, const std::vector<int>& truths);

// Average precision of one class: mean, over positives p, of the precision at
// threshold score(p) (everything scoring >= score(p) counts as retrieved).
// Returns NaN when there are no positives.
double average_precision(const Vector& scores, const std::vector<bool>& positive);

struct MapResult {
  double map = 0.0;
  int classes_scored = 0;
  int classes_without_positives = 0;
};

// scores: n x C; truth: n x C with nonzero = positive.
MapResult mean_ap(const Matrix& scores, const Matrix& truth);

}  // namespace m2dclap::zeroshot
