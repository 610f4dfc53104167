#pragma once

// Synthetic co-occurrence data: an orthonormal vocabulary with two target
// signals, one common token and a pool of irrelevant tokens, plus the
// training/evaluation sets built from it.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "coocdyn/errors.hpp"
#include "coocdyn/rng.hpp"

namespace coocdyn {

/// 1-based vocabulary index; column `id - 1` of the embedding matrix.
using TokenId = int;

inline constexpr TokenId kSignal1 = 1;
inline constexpr TokenId kSignal2 = 2;
inline constexpr TokenId kCommon = 3;
inline constexpr TokenId kFirstPool = 4;

inline constexpr int column_of(TokenId id) { return id - 1; }

enum class Group : int { I1 = 1, I2 = 2, I3 = 3, I4 = 4 };

inline constexpr std::array<Group, 4> kGroups{Group::I1, Group::I2, Group::I3, Group::I4};

inline constexpr int group_index(Group g) { return static_cast<int>(g) - 1; }

inline constexpr int label_of(Group g) { return g == Group::I1 ? +1 : -1; }

enum class EmbeddingMode { canonical, random_orthonormal };

struct Vocabulary {
  int d = 0;
  EmbeddingMode mode = EmbeddingMode::canonical;
  Eigen::MatrixXd embedding;  // d x d, column k-1 is mu_k

  bool canonical() const { return mode == EmbeddingMode::canonical; }
  auto mu(TokenId id) const { return embedding.col(column_of(id)); }
};

struct Sample {
  std::vector<TokenId> tokens;
  int label = -1;
  Group group = Group::I4;

  int length() const { return static_cast<int>(tokens.size()); }
  bool contains(TokenId id) const {
    return std::find(tokens.begin(), tokens.end(), id) != tokens.end();
  }
};

struct Dataset {
  std::vector<Sample> samples;
  std::array<std::vector<std::size_t>, 4> partition;  // I1..I4, ascending sample indices
  bool strict = false;
  int L = 0;
  int d = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return samples.size(); }
  const std::vector<std::size_t>& members(Group g) const { return partition[group_index(g)]; }
};

inline Vocabulary build_vocabulary(int d, EmbeddingMode mode, std::uint64_t seed) {
  if (d < 4) {
    throw ConfigError("vocabulary needs d >= 4, got " + std::to_string(d));
  }
  Vocabulary vocab;
  vocab.d = d;
  vocab.mode = mode;
  if (mode == EmbeddingMode::canonical) {
    vocab.embedding = Eigen::MatrixXd::Identity(d, d);
    return vocab;
  }
  Rng rng = make_stream(seed, "vocabulary");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd gaussian(d, d);
  for (int c = 0; c < d; ++c) {
    for (int r = 0; r < d; ++r) gaussian(r, c) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
  // Fix column signs so the frame is a deterministic function of the draw.
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int c = 0; c < d; ++c) {
    if (r(c, c) < 0) q.col(c) = -q.col(c);
  }
  vocab.embedding = std::move(q);
  return vocab;
}

/// Source of irrelevant tokens. `sampled` draws uniformly with replacement;
/// `fresh` hands out each index once, in ascending order.
class TokenPool {
 public:
  static TokenPool sampled(TokenId first, TokenId last) { return TokenPool(first, last, false); }
  static TokenPool fresh(TokenId first, TokenId last) { return TokenPool(first, last, true); }

  bool strict() const { return fresh_; }
  std::size_t remaining() const {
    if (last_ < first_) return 0;
    return fresh_ ? static_cast<std::size_t>(last_ - next_ + 1)
                  : static_cast<std::size_t>(-1);
  }
  bool empty() const { return last_ < first_ || (fresh_ && next_ > last_); }

  TokenId draw(Rng& rng) {
    if (empty()) throw ConfigError("token pool exhausted");
    if (fresh_) return next_++;
    std::uniform_int_distribution<TokenId> pick(first_, last_);
    return pick(rng);
  }

 private:
  TokenPool(TokenId first, TokenId last, bool fresh)
      : first_(first), last_(last), next_(first), fresh_(fresh) {}

  TokenId first_;
  TokenId last_;
  TokenId next_;
  bool fresh_;
};

inline int special_count(Group g) {
  switch (g) {
    case Group::I1: return 3;
    case Group::I2:
    case Group::I3: return 2;
    case Group::I4: return 1;
  }
  return 1;
}

/// Returns a description of the first violated sample invariant, if any.
inline std::optional<std::string> sample_violation(const Sample& s, int d) {
  int c1 = 0, c2 = 0, c3 = 0;
  for (TokenId id : s.tokens) {
    if (id < 1 || id > d) return "token id " + std::to_string(id) + " outside [1, d]";
    c1 += id == kSignal1;
    c2 += id == kSignal2;
    c3 += id == kCommon;
  }
  if (c3 != 1) return "common token count " + std::to_string(c3) + " != 1";
  const int want1 = (s.group == Group::I1 || s.group == Group::I2) ? 1 : 0;
  const int want2 = (s.group == Group::I1 || s.group == Group::I3) ? 1 : 0;
  if (c1 != want1) return "signal-1 count does not match group";
  if (c2 != want2) return "signal-2 count does not match group";
  if (s.label != label_of(s.group)) return "label does not match group";
  return std::nullopt;
}

inline Sample generate_sample(Rng& rng, const Vocabulary& /*vocab*/, int L, Group group,
                              TokenPool& pool) {
  const int specials = special_count(group);
  if (L < specials) {
    throw ConfigError("sequence length " + std::to_string(L) + " too short for group I" +
                      std::to_string(static_cast<int>(group)));
  }
  if (L > specials && pool.empty()) throw ConfigError("empty token pool");
  if (pool.strict() && pool.remaining() < static_cast<std::size_t>(L - specials)) {
    throw ConfigError("token pool too small for strict sampling");
  }

  // Partial Fisher-Yates: the first `specials` entries of `order` are the
  // special-token positions (common token first).
  std::vector<int> order(L);
  std::iota(order.begin(), order.end(), 0);
  for (int k = 0; k < specials; ++k) {
    std::uniform_int_distribution<int> pick(k, L - 1);
    std::swap(order[k], order[pick(rng)]);
  }

  Sample s;
  s.group = group;
  s.label = label_of(group);
  s.tokens.assign(L, 0);
  s.tokens[order[0]] = kCommon;
  switch (group) {
    case Group::I1:
      s.tokens[order[1]] = kSignal1;
      s.tokens[order[2]] = kSignal2;
      break;
    case Group::I2: s.tokens[order[1]] = kSignal1; break;
    case Group::I3: s.tokens[order[1]] = kSignal2; break;
    case Group::I4: break;
  }
  for (int pos = 0; pos < L; ++pos) {
    if (s.tokens[pos] == 0) s.tokens[pos] = pool.draw(rng);
  }
  return s;
}

/// Vocabulary size that lets every irrelevant slot of a strict training set
/// carry its own token.
inline int strict_vocabulary_size(int n, int L) {
  return 3 + (n / 2) * (L - 3) + (n / 3) * (L - 2) + (n / 6) * (L - 1);
}

enum class DataMode { strict, sampled };

struct TrainingSetOptions {
  int n = 60;
  int L = 5;
  DataMode mode = DataMode::strict;
  int d = 64;  // only used in sampled mode; strict mode computes it
  EmbeddingMode embedding = EmbeddingMode::canonical;
  std::uint64_t seed = 0;
};

inline void rebuild_partition(Dataset& ds) {
  for (auto& cell : ds.partition) cell.clear();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    ds.partition[group_index(ds.samples[i].group)].push_back(i);
  }
}

/// Training set with exact group proportions n/2, n/6, n/6, n/6 (samples laid
/// out group by group). Strict mode also makes every irrelevant token unique.
inline std::pair<Vocabulary, Dataset> generate_training_set(Rng& rng,
                                                            const TrainingSetOptions& opt) {
  if (opt.n <= 0 || opt.n % 6 != 0) {
    throw ConfigError("training set size must be a positive multiple of 6, got " +
                      std::to_string(opt.n));
  }
  if (opt.L < 3) throw ConfigError("training set needs L >= 3, got " + std::to_string(opt.L));

  const bool strict = opt.mode == DataMode::strict;
  const int d = strict ? strict_vocabulary_size(opt.n, opt.L) : opt.d;
  if (!strict && d < 4) throw ConfigError("sampled mode needs d >= 4");
  Vocabulary vocab = build_vocabulary(d, opt.embedding, opt.seed);

  TokenPool pool = strict ? TokenPool::fresh(kFirstPool, vocab.d)
                          : TokenPool::sampled(kFirstPool, vocab.d);
  const std::array<int, 4> counts{opt.n / 2, opt.n / 6, opt.n / 6, opt.n / 6};

  Dataset ds;
  ds.strict = strict;
  ds.L = opt.L;
  ds.d = vocab.d;
  ds.seed = opt.seed;
  ds.samples.reserve(opt.n);
  for (Group g : kGroups) {
    for (int k = 0; k < counts[group_index(g)]; ++k) {
      ds.samples.push_back(generate_sample(rng, vocab, opt.L, g, pool));
    }
  }
  rebuild_partition(ds);
  return {std::move(vocab), std::move(ds)};
}

/// i.i.d. draws from the data distribution: groups with probabilities
/// (1/2, 1/6, 1/6, 1/6), irrelevant tokens uniform with replacement.
inline Dataset generate_eval_set(Rng& rng, const Vocabulary& vocab, int L, int n_eval,
                                 std::uint64_t seed = 0) {
  if (n_eval < 1) throw ConfigError("evaluation set needs n_eval >= 1");
  if (L < 1) throw ConfigError("evaluation set needs L >= 1");
  TokenPool pool = TokenPool::sampled(kFirstPool, vocab.d);
  std::uniform_int_distribution<int> die(0, 5);
  Dataset ds;
  ds.strict = false;
  ds.L = L;
  ds.d = vocab.d;
  ds.seed = seed;
  ds.samples.reserve(n_eval);
  for (int k = 0; k < n_eval; ++k) {
    const int face = die(rng);
    const Group g = face < 3 ? Group::I1 : static_cast<Group>(face - 1);
    ds.samples.push_back(generate_sample(rng, vocab, L, g, pool));
  }
  rebuild_partition(ds);
  return ds;
}

/// Returns a description of the first violated dataset invariant, if any.
inline std::optional<std::string> dataset_violation(const Dataset& ds) {
  std::vector<int> seen(ds.samples.size(), 0);
  for (Group g : kGroups) {
    for (std::size_t i : ds.members(g)) {
      if (i >= ds.samples.size()) return "partition index out of range";
      if (ds.samples[i].group != g) return "sample group does not match its partition cell";
      ++seen[i];
    }
  }
  for (int c : seen) {
    if (c != 1) return "partition cells are not a disjoint cover";
  }
  for (const Sample& s : ds.samples) {
    if (s.length() != ds.L) return "sample length differs from L";
    if (auto v = sample_violation(s, ds.d)) return v;
  }
  if (ds.strict) {
    const std::size_t n = ds.size();
    if (n % 6 != 0) return "strict dataset size not divisible by 6";
    if (ds.members(Group::I1).size() != n / 2 || ds.members(Group::I2).size() != n / 6 ||
        ds.members(Group::I3).size() != n / 6 || ds.members(Group::I4).size() != n / 6) {
      return "strict dataset proportions are not exact";
    }
    std::vector<int> uses(ds.d + 1, 0);
    for (const Sample& s : ds.samples) {
      for (TokenId id : s.tokens) {
        if (id >= kFirstPool && ++uses[id] > 1) {
          return "irrelevant token " + std::to_string(id) + " repeats in strict dataset";
        }
      }
    }
  }
  return std::nullopt;
}

/// CSV layout: header `n,L,d,strict,seed`, then one `group,y,id_1,...,id_L`
/// record per sample.
inline void write_dataset(std::ostream& out, const Dataset& ds) {
  out << ds.size() << ',' << ds.L << ',' << ds.d << ',' << (ds.strict ? 1 : 0) << ','
      << ds.seed << '\n';
  for (const Sample& s : ds.samples) {
    out << static_cast<int>(s.group) << ',' << s.label;
    for (TokenId id : s.tokens) out << ',' << id;
    out << '\n';
  }
}

namespace detail {

inline std::vector<long long> split_ints(const std::string& line) {
  std::vector<long long> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(field, &used);
    } catch (const std::exception&) {
      throw InputError("not an integer: '" + field + "'");
    }
    if (used != field.size()) throw InputError("not an integer: '" + field + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace detail

inline Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("dataset file is empty");
  const auto head = detail::split_ints(line);
  if (head.size() != 5) throw InputError("dataset header must be n,L,d,strict,seed");
  Dataset ds;
  const auto n = static_cast<std::size_t>(head[0]);
  ds.L = static_cast<int>(head[1]);
  ds.d = static_cast<int>(head[2]);
  ds.strict = head[3] != 0;
  ds.seed = static_cast<std::uint64_t>(head[4]);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = detail::split_ints(line);
    if (rec.size() != static_cast<std::size_t>(ds.L) + 2) {
      throw InputError("dataset record has " + std::to_string(rec.size()) + " fields");
    }
    if (rec[0] < 1 || rec[0] > 4) throw InputError("bad group id in dataset record");
    Sample s;
    s.group = static_cast<Group>(rec[0]);
    s.label = static_cast<int>(rec[1]);
    for (std::size_t k = 2; k < rec.size(); ++k) s.tokens.push_back(static_cast<TokenId>(rec[k]));
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.size() != n) throw InputError("dataset header count disagrees with records");
  rebuild_partition(ds);
  if (auto v = dataset_violation(ds)) throw InputError("invalid dataset: " + *v);
  return ds;
}

}  // namespace coocdyn
