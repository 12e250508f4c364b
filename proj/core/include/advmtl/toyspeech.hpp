#pragma once

// Synthetic accented "speech": each word is a fixed prototype vector,
// held for a few frames, passed through a per-accent linear map, plus noise.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "advmtl/types.hpp"

namespace advmtl {

/// Word inventory. Valid and test utterances say content words only; lorem
/// words supply adversarial targets, so a target never shares a word with the
/// utterance it is aimed at. Both share one id space: content words first,
/// then lorem words.
class Vocab {
 public:
  Vocab();
  Vocab(std::vector<std::string> words, std::vector<std::string> lorem_words);

  std::size_t content_size() const { return words_.size(); }
  std::size_t lorem_size() const { return lorem_.size(); }
  /// Total number of word types; the label alphabet size of both ASR heads.
  std::size_t size() const { return words_.size() + lorem_.size(); }

  // Special symbols. blank lives only in the CTC output space, eos only in the
  // decoder output space and sos only in the decoder input embedding, so they
  // share the index just past the last word without ever colliding.
  WordId blank() const { return static_cast<WordId>(size()); }
  WordId eos() const { return static_cast<WordId>(size()); }
  WordId sos() const { return static_cast<WordId>(size()); }
  static constexpr WordId kPad = -1;

  bool is_content(WordId id) const;
  bool is_lorem(WordId id) const;
  WordId first_lorem() const { return static_cast<WordId>(words_.size()); }

  const std::string& word(WordId id) const;
  WordId id(const std::string& word) const;
  std::string join(const Transcript& t) const;
  Transcript parse(const std::string& text) const;

  /// FNV-1a over all word strings in id order.
  std::uint64_t hash() const;

 private:
  std::vector<std::string> words_;
  std::vector<std::string> lorem_;
};

struct Utterance {
  std::string id;
  FeatureSequence features;
  Transcript transcript;
  AccentLabel accent = 0;
};

struct DatasetSplit {
  std::vector<Utterance> train, valid, test;
  std::uint64_t seed = 0;
};

struct WorldConfig {
  std::size_t feat_dim = 16;
  double noise_sigma = 0.05;
  int min_frames_per_word = 3;
  int max_frames_per_word = 6;
  /// Seeds prototypes and accent maps; fixed so every dataset speaks the same "language".
  std::uint64_t world_seed = 20230101;
  /// Draw training transcripts over content and lorem words alike, so attack
  /// targets are words the recognizer can actually emit. Valid and test
  /// transcripts always use content words only.
  bool lorem_in_train = true;
  /// When > 0, transcripts follow a seeded bigram grammar: each word may only
  /// be followed by this many fixed successors from its own class (content or
  /// lorem). 0 draws every word independently.
  std::size_t grammar_successors = 0;
};

struct LengthRange {
  int min = 2;
  int max = 6;
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::mt19937_64& engine() { return engine_; }
  int uniform_int(int lo, int hi);
  double normal(double sigma);

 private:
  std::mt19937_64 engine_;
};

/// Holds the fixed word prototypes and accent transforms.
class ToySpeech {
 public:
  explicit ToySpeech(WorldConfig config = {}, Vocab vocab = {});

  const Vocab& vocab() const { return vocab_; }
  const WorldConfig& config() const { return config_; }
  std::size_t feat_dim() const { return config_.feat_dim; }
  /// Unit-norm prototype of a content or lorem word.
  std::span<const double> prototype(WordId w) const;
  /// F x F accent map.
  const Matrix& accent_map(AccentLabel a) const;
  /// Words allowed after `w` under the grammar; empty when there is none.
  std::span<const WordId> successors(WordId w) const;

  FeatureSequence render_utterance(const Transcript& tokens, AccentLabel accent,
                                   Rng& rng) const;

  DatasetSplit gen_dataset(std::uint64_t seed, std::size_t n_train,
                           std::size_t n_valid, std::size_t n_test,
                           LengthRange len) const;

  std::vector<Transcript> gen_adv_targets(std::uint64_t seed, std::size_t count,
                                          LengthRange len) const;

 private:
  std::vector<Utterance> gen_split(const std::string& prefix, std::size_t n,
                                   LengthRange len, bool with_lorem, Rng& rng) const;

  WorldConfig config_;
  Vocab vocab_;
  std::vector<double> prototypes_;  // content_size x F
  std::vector<Matrix> accent_maps_;
  std::vector<std::vector<WordId>> successors_;  // empty without a grammar
};

inline constexpr int kNumAccents = 2;

/// Closest length to the original; ties go to the lowest index.
const Transcript& select_adv_target(const Transcript& original,
                                    const std::vector<Transcript>& targets);

// Line-oriented split files:
//   # toyspeech v1 feat_dim=<F> vocab_hash=<16 hex> utterances=<N>
//   <id>\t<accent>\t<space-joined words>\t<T>
//   T lines of F space-separated %.17g values
void write_split(std::ostream& os, const std::vector<Utterance>& utts,
                 const Vocab& vocab, std::size_t feat_dim);
std::vector<Utterance> read_split(std::istream& is, const Vocab& vocab,
                                  std::size_t feat_dim);

/// Writes train.txt, valid.txt, test.txt under `dir`.
void save_dataset(const std::filesystem::path& dir, const DatasetSplit& data,
                  const Vocab& vocab, std::size_t feat_dim);
DatasetSplit load_dataset(const std::filesystem::path& dir, const Vocab& vocab,
                          std::size_t feat_dim);

/// One transcript per line, space-joined words.
void write_transcripts(std::ostream& os, const std::vector<Transcript>& ts,
                       const Vocab& vocab);
std::vector<Transcript> read_transcripts(std::istream& is, const Vocab& vocab);

}  // namespace advmtl
