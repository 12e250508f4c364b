#pragma once

#include <cstddef>
#include <vector>

#include "advmtl/types.hpp"

namespace advmtl {

struct WerStats {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t ref_len = 0;
  double wer = 0.0;

  std::size_t errors() const { return substitutions + deletions + insertions; }
};

/// Unit-cost Levenshtein alignment of words. When several alignments are
/// optimal the backtrace prefers substitution, then deletion, then insertion.
WerStats edit_distance_words(const Transcript& ref, const Transcript& hyp);

/// WER of the prediction against the attacker's target. Higher is more robust.
double adv_twer(const Transcript& target, const Transcript& prediction);

double accent_accuracy(const std::vector<int>& predicted, const std::vector<int>& gold);

/// Pooled corpus WER: total errors over total reference words.
class WerAccumulator {
 public:
  void add(const WerStats& s) {
    errors_ += s.errors();
    ref_words_ += s.ref_len;
  }
  void add(const Transcript& ref, const Transcript& hyp) { add(edit_distance_words(ref, hyp)); }
  std::size_t errors() const { return errors_; }
  std::size_t ref_words() const { return ref_words_; }
  double wer() const;

 private:
  std::size_t errors_ = 0;
  std::size_t ref_words_ = 0;
};

}  // namespace advmtl
