#include "advmtl/toyspeech.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

namespace advmtl {

double frobenius_norm(const Matrix& m) {
  double ss = 0.0;
  for (double v : m.data) ss += v * v;
  return std::sqrt(ss);
}

// --- Vocab ------------------------------------------------------------------

namespace {

std::vector<std::string> default_words() {
  return {"red",   "blue",  "green", "black", "white", "stop",
          "go",    "left",  "right", "up",    "down",  "yes",
          "no",    "one",   "two",   "three", "four",  "five",
          "north", "south", "east",  "west",  "open",  "close"};
}

std::vector<std::string> default_lorem() {
  return {"lorem",  "ipsum", "dolor",  "sit",     "amet",       "consectetur",
          "adipiscing", "elit", "sed",  "eiusmod", "tempor",     "incididunt",
          "labore", "magna", "aliqua", "veniam"};
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

Vocab::Vocab() : Vocab(default_words(), default_lorem()) {}

Vocab::Vocab(std::vector<std::string> words, std::vector<std::string> lorem_words)
    : words_(std::move(words)), lorem_(std::move(lorem_words)) {
  if (words_.empty()) throw std::invalid_argument("vocab needs at least one word");
  std::unordered_set<std::string> seen;
  for (const auto& w : words_) {
    if (!seen.insert(w).second) throw std::invalid_argument("duplicate word: " + w);
  }
  for (const auto& w : lorem_) {
    if (!seen.insert(w).second) {
      throw std::invalid_argument("lorem word overlaps vocabulary: " + w);
    }
  }
}

bool Vocab::is_content(WordId id) const {
  return id >= 0 && static_cast<std::size_t>(id) < words_.size();
}

bool Vocab::is_lorem(WordId id) const {
  return id >= first_lorem() && static_cast<std::size_t>(id) < size();
}

const std::string& Vocab::word(WordId id) const {
  if (is_content(id)) return words_[static_cast<std::size_t>(id)];
  if (is_lorem(id)) return lorem_[static_cast<std::size_t>(id - first_lorem())];
  throw std::out_of_range("unknown word id " + std::to_string(id));
}

WordId Vocab::id(const std::string& word) const {
  for (std::size_t i = 0; i < words_.size(); ++i)
    if (words_[i] == word) return static_cast<WordId>(i);
  for (std::size_t i = 0; i < lorem_.size(); ++i)
    if (lorem_[i] == word) return static_cast<WordId>(words_.size() + i);
  throw std::out_of_range("unknown word '" + word + "'");
}

std::string Vocab::join(const Transcript& t) const {
  std::string out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) out += ' ';
    out += word(t[i]);
  }
  return out;
}

Transcript Vocab::parse(const std::string& text) const {
  std::istringstream is(text);
  Transcript t;
  std::string w;
  while (is >> w) t.push_back(id(w));
  return t;
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& w : words_) h = fnv1a(w + "\n", h);
  h = fnv1a("|", h);
  for (const auto& w : lorem_) h = fnv1a(w + "\n", h);
  return h;
}

// --- Rng --------------------------------------------------------------------

int Rng::uniform_int(int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(engine_);
}

double Rng::normal(double sigma) {
  return std::normal_distribution<double>(0.0, sigma)(engine_);
}

// --- ToySpeech --------------------------------------------------------------

ToySpeech::ToySpeech(WorldConfig config, Vocab vocab)
    : config_(config), vocab_(std::move(vocab)) {
  const std::size_t F = config_.feat_dim;
  if (F == 0) throw std::invalid_argument("feat_dim must be >= 1");
  if (config_.min_frames_per_word < 1 ||
      config_.max_frames_per_word < config_.min_frames_per_word) {
    throw std::invalid_argument("invalid frames-per-word range");
  }
  Rng rng(config_.world_seed);
  const double inv_sqrt_f = 1.0 / std::sqrt(static_cast<double>(F));

  // Prototypes share a common direction so that the per-accent maps shift
  // utterance means in a consistent, linearly detectable way.
  std::vector<double> common(F);
  for (auto& v : common) v = rng.normal(1.0);
  double cn = 0.0;
  for (double v : common) cn += v * v;
  for (auto& v : common) v /= std::sqrt(cn);

  // Content prototypes are drawn first so adding lorem words leaves them unchanged.
  prototypes_.assign(vocab_.size() * F, 0.0);
  for (std::size_t w = 0; w < vocab_.size(); ++w) {
    double ss = 0.0;
    for (std::size_t f = 0; f < F; ++f) {
      const double v = 0.8 * common[f] + rng.normal(inv_sqrt_f);
      prototypes_[w * F + f] = v;
      ss += v * v;
    }
    const double n = std::sqrt(ss);
    for (std::size_t f = 0; f < F; ++f) prototypes_[w * F + f] /= n;
  }

  for (int a = 0; a < kNumAccents; ++a) {
    Matrix m(F, F);
    for (std::size_t i = 0; i < F; ++i)
      for (std::size_t j = 0; j < F; ++j)
        m(i, j) = (i == j ? 1.0 : 0.0) + 0.5 * rng.normal(inv_sqrt_f);
    accent_maps_.push_back(std::move(m));
  }

  if (config_.grammar_successors > 0) {
    Rng g(config_.world_seed ^ 0x9e3779b97f4a7c15ULL);
    auto draw = [&](WordId lo, WordId hi) {
      std::vector<WordId> pool;
      for (WordId w = lo; w < hi; ++w) pool.push_back(w);
      std::shuffle(pool.begin(), pool.end(), g.engine());
      pool.resize(std::min(pool.size(), config_.grammar_successors));
      std::sort(pool.begin(), pool.end());
      return pool;
    };
    const auto n_content = static_cast<WordId>(vocab_.content_size());
    const auto n_all = static_cast<WordId>(vocab_.size());
    for (WordId w = 0; w < n_all; ++w)
      successors_.push_back(w < n_content ? draw(0, n_content) : draw(n_content, n_all));
  }
}

std::span<const WordId> ToySpeech::successors(WordId w) const {
  if (successors_.empty()) return {};
  if (w < 0 || static_cast<std::size_t>(w) >= successors_.size()) {
    throw std::out_of_range("successors: word id " + std::to_string(w));
  }
  return successors_[static_cast<std::size_t>(w)];
}

std::span<const double> ToySpeech::prototype(WordId w) const {
  if (!vocab_.is_content(w) && !vocab_.is_lorem(w)) {
    throw std::out_of_range("no prototype for word id " + std::to_string(w));
  }
  return {&prototypes_[static_cast<std::size_t>(w) * config_.feat_dim],
          config_.feat_dim};
}

const Matrix& ToySpeech::accent_map(AccentLabel a) const {
  if (a < 0 || a >= kNumAccents) {
    throw std::out_of_range("accent label " + std::to_string(a));
  }
  return accent_maps_[static_cast<std::size_t>(a)];
}

FeatureSequence ToySpeech::render_utterance(const Transcript& tokens,
                                            AccentLabel accent, Rng& rng) const {
  if (tokens.empty()) throw std::invalid_argument("render_utterance: empty transcript");
  for (WordId w : tokens) {
    if (!vocab_.is_content(w) && !vocab_.is_lorem(w)) {
      throw std::out_of_range("render_utterance: unknown token id " + std::to_string(w));
    }
  }
  const Matrix& A = accent_map(accent);
  const std::size_t F = config_.feat_dim;
  std::vector<int> lens;
  lens.reserve(tokens.size());
  std::size_t T = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    lens.push_back(rng.uniform_int(config_.min_frames_per_word,
                                   config_.max_frames_per_word));
    T += static_cast<std::size_t>(lens.back());
  }
  FeatureSequence x(T, F);
  std::vector<double> mapped(F);
  std::size_t t = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto p = prototype(tokens[i]);
    for (std::size_t r = 0; r < F; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < F; ++c) acc += A(r, c) * p[c];
      mapped[r] = acc;
    }
    for (int k = 0; k < lens[i]; ++k, ++t)
      for (std::size_t f = 0; f < F; ++f)
        x(t, f) = mapped[f] + (config_.noise_sigma > 0.0 ? rng.normal(config_.noise_sigma) : 0.0);
  }
  return x;
}

std::vector<Utterance> ToySpeech::gen_split(const std::string& prefix,
                                            std::size_t n, LengthRange len,
                                            bool with_lorem, Rng& rng) const {
  std::vector<Utterance> out;
  out.reserve(n);
  const int last_word =
      static_cast<int>(with_lorem ? vocab_.size() : vocab_.content_size()) - 1;
  for (std::size_t i = 0; i < n; ++i) {
    Utterance u;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%05zu", prefix.c_str(), i);
    u.id = buf;
    u.accent = static_cast<AccentLabel>(i % kNumAccents);
    const int length = rng.uniform_int(len.min, len.max);
    u.transcript.push_back(rng.uniform_int(0, last_word));
    while (static_cast<int>(u.transcript.size()) < length) {
      auto next = successors(u.transcript.back());
      u.transcript.push_back(
          next.empty() ? rng.uniform_int(0, last_word)
                       : next[static_cast<std::size_t>(
                             rng.uniform_int(0, static_cast<int>(next.size()) - 1))]);
    }
    u.features = render_utterance(u.transcript, u.accent, rng);
    out.push_back(std::move(u));
  }
  return out;
}

DatasetSplit ToySpeech::gen_dataset(std::uint64_t seed, std::size_t n_train,
                                    std::size_t n_valid, std::size_t n_test,
                                    LengthRange len) const {
  if (n_train == 0 || n_valid == 0 || n_test == 0) {
    throw std::invalid_argument("gen_dataset: split sizes must be >= 1");
  }
  if (len.min < 1 || len.max < len.min) {
    throw std::invalid_argument("gen_dataset: invalid length range");
  }
  Rng rng(seed);
  DatasetSplit d;
  d.seed = seed;
  d.train = gen_split("train", n_train, len, config_.lorem_in_train, rng);
  d.valid = gen_split("valid", n_valid, len, false, rng);
  d.test = gen_split("test", n_test, len, false, rng);
  return d;
}

std::vector<Transcript> ToySpeech::gen_adv_targets(std::uint64_t seed,
                                                   std::size_t count,
                                                   LengthRange len) const {
  if (vocab_.lorem_size() == 0) throw std::invalid_argument("lorem vocabulary is empty");
  if (len.min < 1 || len.max < len.min) {
    throw std::invalid_argument("gen_adv_targets: invalid length range");
  }
  const auto span = static_cast<std::size_t>(len.max - len.min + 1);
  if (count < span) {
    throw std::invalid_argument("gen_adv_targets: count " + std::to_string(count) +
                                " cannot cover " + std::to_string(span) + " lengths");
  }
  Rng rng(seed);
  const int lo = vocab_.first_lorem();
  const int hi = static_cast<int>(vocab_.size()) - 1;
  std::vector<Transcript> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int length = len.min + static_cast<int>(i % span);
    Transcript t;
    while (static_cast<int>(t.size()) < length) {
      const WordId w = rng.uniform_int(lo, hi);
      // No immediate repeats, so CTC needs exactly |t| frames.
      if (!t.empty() && t.back() == w && lo != hi) continue;
      t.push_back(w);
    }
    out.push_back(std::move(t));
  }
  return out;
}

const Transcript& select_adv_target(const Transcript& original,
                                    const std::vector<Transcript>& targets) {
  if (targets.empty()) throw std::invalid_argument("select_adv_target: no targets");
  std::size_t best = 0;
  auto dist = [&](const Transcript& t) {
    const auto a = static_cast<long>(t.size());
    const auto b = static_cast<long>(original.size());
    return a > b ? a - b : b - a;
  };
  for (std::size_t i = 1; i < targets.size(); ++i) {
    if (dist(targets[i]) < dist(targets[best])) best = i;
  }
  return targets[best];
}

// --- Persistence ------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(std::string_view s) {
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (end == tmp.c_str() || *end != '\0') {
    throw std::runtime_error("malformed number '" + tmp + "'");
  }
  return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void write_split(std::ostream& os, const std::vector<Utterance>& utts,
                 const Vocab& vocab, std::size_t feat_dim) {
  os << "# toyspeech v1 feat_dim=" << feat_dim << " vocab_hash=" << hex64(vocab.hash())
     << " utterances=" << utts.size() << '\n';
  for (const auto& u : utts) {
    if (u.features.cols != feat_dim) {
      throw std::invalid_argument("utterance " + u.id + " has wrong feature width");
    }
    os << u.id << '\t' << u.accent << '\t' << vocab.join(u.transcript) << '\t'
       << u.features.rows << '\n';
    for (std::size_t t = 0; t < u.features.rows; ++t) {
      for (std::size_t f = 0; f < feat_dim; ++f) {
        if (f) os << ' ';
        os << format_double(u.features(t, f));
      }
      os << '\n';
    }
  }
}

std::vector<Utterance> read_split(std::istream& is, const Vocab& vocab,
                                  std::size_t feat_dim) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("split file is empty");
  std::size_t header_dim = 0, count = 0;
  char hash_buf[17] = {};
  if (std::sscanf(line.c_str(), "# toyspeech v1 feat_dim=%zu vocab_hash=%16s utterances=%zu",
                  &header_dim, hash_buf, &count) != 3) {
    throw std::runtime_error("bad split header: " + line);
  }
  if (header_dim != feat_dim) {
    throw std::runtime_error("split feat_dim " + std::to_string(header_dim) +
                             " != expected " + std::to_string(feat_dim));
  }
  if (hash_buf != hex64(vocab.hash())) {
    throw std::runtime_error("split was written with a different vocabulary");
  }
  std::vector<Utterance> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    if (!std::getline(is, line)) throw std::runtime_error("split truncated at utterance " + std::to_string(k));
    const auto fields = split_tabs(line);
    if (fields.size() != 4) throw std::runtime_error("bad utterance line: " + line);
    Utterance u;
    u.id = fields[0];
    u.accent = std::stoi(fields[1]);
    if (u.accent < 0 || u.accent >= kNumAccents) throw std::runtime_error("bad accent in " + u.id);
    u.transcript = vocab.parse(fields[2]);
    const auto T = static_cast<std::size_t>(std::stoul(fields[3]));
    u.features = FeatureSequence(T, feat_dim);
    for (std::size_t t = 0; t < T; ++t) {
      if (!std::getline(is, line)) throw std::runtime_error("split truncated inside " + u.id);
      std::size_t f = 0, start = 0;
      while (start <= line.size() && f < feat_dim) {
        auto pos = line.find(' ', start);
        if (pos == std::string::npos) pos = line.size();
        u.features(t, f++) = parse_double(std::string_view(line).substr(start, pos - start));
        start = pos + 1;
      }
      if (f != feat_dim || start <= line.size()) {
        throw std::runtime_error("wrong number of features in " + u.id);
      }
    }
    out.push_back(std::move(u));
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const DatasetSplit& data,
                  const Vocab& vocab, std::size_t feat_dim) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, const std::vector<Utterance>*> parts[] = {
      {"train.txt", &data.train}, {"valid.txt", &data.valid}, {"test.txt", &data.test}};
  for (const auto& [name, utts] : parts) {
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / name).string());
    write_split(os, *utts, vocab, feat_dim);
  }
}

DatasetSplit load_dataset(const std::filesystem::path& dir, const Vocab& vocab,
                          std::size_t feat_dim) {
  auto load = [&](const char* name) {
    std::ifstream is(dir / name, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + (dir / name).string());
    return read_split(is, vocab, feat_dim);
  };
  DatasetSplit d;
  d.train = load("train.txt");
  d.valid = load("valid.txt");
  d.test = load("test.txt");
  return d;
}

void write_transcripts(std::ostream& os, const std::vector<Transcript>& ts,
                       const Vocab& vocab) {
  for (const auto& t : ts) os << vocab.join(t) << '\n';
}

std::vector<Transcript> read_transcripts(std::istream& is, const Vocab& vocab) {
  std::vector<Transcript> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(vocab.parse(line));
  }
  return out;
}

}  // namespace advmtl
