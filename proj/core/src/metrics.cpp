#include "advmtl/metrics.hpp"

#include <algorithm>
#include <stdexcept>

namespace advmtl {

WerStats edit_distance_words(const Transcript& ref, const Transcript& hyp) {
  if (ref.empty()) throw std::invalid_argument("edit_distance_words: empty reference");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }

  WerStats s;
  s.ref_len = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool match = ref[i - 1] == hyp[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (match ? 0 : 1)) {
        if (!match) ++s.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++s.deletions;
      --i;
    } else {
      ++s.insertions;
      --j;
    }
  }
  s.wer = static_cast<double>(s.errors()) / static_cast<double>(n);
  return s;
}

double adv_twer(const Transcript& target, const Transcript& prediction) {
  if (target.empty()) throw std::invalid_argument("adv_twer: empty target");
  return edit_distance_words(target, prediction).wer;
}

double accent_accuracy(const std::vector<int>& predicted, const std::vector<int>& gold) {
  if (predicted.size() != gold.size()) {
    throw std::invalid_argument("accent_accuracy: length mismatch");
  }
  if (gold.empty()) throw std::invalid_argument("accent_accuracy: no labels");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += predicted[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

double WerAccumulator::wer() const {
  if (ref_words_ == 0) throw std::logic_error("WerAccumulator: no reference words");
  return static_cast<double>(errors_) / static_cast<double>(ref_words_);
}

}  // namespace advmtl
