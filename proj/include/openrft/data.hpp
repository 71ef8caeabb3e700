#pragma once

// Question augmentation (template rewrites plus independent option
// shuffles) and the retrieval store behind few-shot context conditioning.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "openrft/common.hpp"
#include "openrft/policy.hpp"
#include "openrft/task_env.hpp"

namespace openrft {

struct AugmentConfig {
  int n_variants = 5;
  std::uint64_t shuffle_seed = 0;
  // Probability of perturbing one option value of a variant by +-1. The
  // perturbed option may be the gold one, which makes the variant wrong.
  double corruption_prob = 0.0;

  void validate() const {
    if (n_variants < 0) throw ConfigError("n_variants must be >= 0");
    if (n_variants + 1 > kNumTextTemplates) throw ConfigError("text template pool exhausted: n_variants + 1 exceeds the pool");
    if (!(corruption_prob >= 0.0 && corruption_prob <= 1.0)) throw ConfigError("corruption_prob must be in [0, 1]");
  }
};

// Variant ids live above every original id and encode (origin id, variant).
inline constexpr std::int64_t kAugmentedIdBase = 1'000'000'000'000LL;
inline constexpr int kMaxVariants = 63;

inline std::int64_t augmented_id(std::int64_t origin_id, int variant_index) {
  return kAugmentedIdBase + origin_id * (kMaxVariants + 1) + variant_index;
}

// Applies a letter permutation: option i of `q` becomes option perm[i].
inline Question permute_options(const Question& q, const std::array<int, kNumOptions>& perm) {
  Question out = q;
  for (int i = 0; i < kNumOptions; ++i)
    out.options[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = q.options[static_cast<std::size_t>(i)];
  out.gold_letter = letter_of(perm[static_cast<std::size_t>(q.gold_index())]);
  return out;
}

inline std::vector<Question> augment_question(const Question& q, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (q.id >= kAugmentedIdBase) throw ConfigError("cannot augment an augmented question");
  std::vector<Question> out;
  out.reserve(static_cast<std::size_t>(cfg.n_variants));
  for (int v = 1; v <= cfg.n_variants; ++v) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(q.id), static_cast<std::uint64_t>(v), cfg.shuffle_seed}));
    std::array<int, kNumOptions> perm = {0, 1, 2, 3};
    rng.shuffle(std::span<int>(perm));
    Question variant = permute_options(q, perm);
    variant.id = augmented_id(q.id, v);
    variant.text = render_question_text(q.v0, q.ops, v);
    Provenance pv;
    pv.origin_id = q.id;
    pv.variant_index = v;
    pv.permutation = perm;
    if (cfg.corruption_prob > 0.0 && rng.uniform() < cfg.corruption_prob) {
      const auto slot = static_cast<std::size_t>(rng.uniform_int(0, kNumOptions - 1));
      const int delta = rng.uniform() < 0.5 ? -1 : 1;
      int candidate = variant.options[slot] + delta;
      // keep option values distinct
      while (std::find(variant.options.begin(), variant.options.end(), candidate) != variant.options.end()) candidate += delta;
      variant.options[slot] = candidate;
      pv.corrupted = true;
    }
    variant.provenance = pv;
    out.push_back(std::move(variant));
  }
  return out;
}

// Originals followed by their variants, in input order.
inline std::vector<Question> augment_dataset(const std::vector<Question>& qs, const AugmentConfig& cfg,
                                             std::uint64_t seed) {
  std::vector<Question> out = qs;
  for (const auto& q : qs) {
    auto vs = augment_question(q, cfg, seed);
    out.insert(out.end(), std::make_move_iterator(vs.begin()), std::make_move_iterator(vs.end()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding

inline constexpr int kDefaultEmbeddingDim = 64;

// Lowercased maximal runs of ASCII letters and digits.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline int token_bucket(std::string_view token, int dim) {
  return static_cast<int>(fnv1a64(token) % static_cast<std::uint64_t>(dim));
}

// Hashed bag of tokens: bucket = FNV-1a-64(token) mod dim, counts, then L2
// normalization. Empty text embeds to the zero vector.
inline std::vector<double> embed(std::string_view text, int dim = kDefaultEmbeddingDim) {
  if (dim < 1) throw ConfigError("embedding dim must be positive");
  std::vector<double> v(static_cast<std::size_t>(dim), 0.0);
  for (const auto& tok : tokenize(text)) v[static_cast<std::size_t>(token_bucket(tok, dim))] += 1.0;
  const double n = l2_norm(v);
  if (n > 0.0)
    for (double& x : v) x /= n;
  return v;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

// ---------------------------------------------------------------------------
// Retrieval index

struct IndexEntry {
  std::int64_t id = 0;
  std::vector<double> vector;
  std::string question;
  int answer = 0;  // gold option value
  bool operator==(const IndexEntry&) const = default;
};

struct RetrievalIndex {
  int dim = kDefaultEmbeddingDim;
  std::vector<IndexEntry> entries;
  bool operator==(const RetrievalIndex&) const = default;
};

struct Retrieved {
  std::int64_t id = 0;
  double score = 0.0;
  bool operator==(const Retrieved&) const = default;
};

inline RetrievalIndex build_index(const std::vector<Question>& samples, int dim = kDefaultEmbeddingDim) {
  RetrievalIndex idx;
  idx.dim = dim;
  std::unordered_set<std::int64_t> seen;
  for (const auto& q : samples) {
    if (!seen.insert(q.id).second) throw ConfigError("duplicate sample id " + std::to_string(q.id));
    idx.entries.push_back({q.id, embed(q.text, dim), q.text, q.gold_value()});
  }
  return idx;
}

// Top-k by cosine similarity, ties broken by ascending id. `exclude_id`
// drops a self-match.
inline std::vector<Retrieved> retrieve(const RetrievalIndex& idx, std::string_view query_text, int k = 3,
                                       std::optional<std::int64_t> exclude_id = std::nullopt) {
  if (k < 1) throw ConfigError("retrieve: k must be >= 1");
  const auto q = embed(query_text, idx.dim);
  std::vector<Retrieved> all;
  all.reserve(idx.entries.size());
  for (const auto& e : idx.entries) {
    if (exclude_id && e.id == *exclude_id) continue;
    all.push_back({e.id, cosine(q, e.vector)});
  }
  const auto better = [](const Retrieved& a, const Retrieved& b) {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
  };
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), better);
  all.resize(n);
  return all;
}

inline const IndexEntry* find_entry(const RetrievalIndex& idx, std::int64_t id) {
  for (const auto& e : idx.entries)
    if (e.id == id) return &e;
  return nullptr;
}

// Mean exemplar embedding (dim entries) followed by the exemplar answers
// divided by value_bound, sorted ascending and zero-padded to k_max.
// Exemplars are summed in id order, so the block does not depend on the
// order of `retrieved`.
inline ContextBlock icl_context(const RetrievalIndex& idx, std::span<const Retrieved> retrieved, int k_max = 3,
                                int value_bound = 1000) {
  ContextBlock block;
  block.values.assign(static_cast<std::size_t>(idx.dim + k_max), 0.0);
  if (retrieved.empty()) return block;
  if (static_cast<int>(retrieved.size()) > k_max) throw ConfigError("icl_context: more exemplars than k_max");
  std::vector<const IndexEntry*> ex;
  for (const auto& r : retrieved) {
    const IndexEntry* e = find_entry(idx, r.id);
    if (!e) throw ConfigError("icl_context: unknown exemplar id " + std::to_string(r.id));
    ex.push_back(e);
  }
  std::sort(ex.begin(), ex.end(), [](const IndexEntry* a, const IndexEntry* b) { return a->id < b->id; });
  for (const IndexEntry* e : ex) axpy(std::span<double>(block.values.data(), static_cast<std::size_t>(idx.dim)), 1.0, e->vector);
  const double inv = 1.0 / static_cast<double>(ex.size());
  for (int i = 0; i < idx.dim; ++i) block.values[static_cast<std::size_t>(i)] *= inv;
  std::vector<double> answers;
  for (const IndexEntry* e : ex) answers.push_back(std::clamp(static_cast<double>(e->answer) / value_bound, -1.0, 1.0));
  std::sort(answers.begin(), answers.end());
  std::copy(answers.begin(), answers.end(), block.values.begin() + idx.dim);
  return block;
}

// Context blocks for every question, retrieving from `idx` and excluding
// exact-id self matches.
inline ContextMap build_contexts(const RetrievalIndex& idx, const std::vector<Question>& qs, int k = 3,
                                 int value_bound = 1000) {
  ContextMap out;
  for (const auto& q : qs) {
    const auto hits = retrieve(idx, q.text, k, q.id);
    out.emplace(q.id, icl_context(idx, hits, k, value_bound));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: {"dim": D, "entries": [{"id", "vector", "question", "answer"}]}

inline std::string write_index(const RetrievalIndex& idx) {
  nlohmann::ordered_json j;
  j["dim"] = idx.dim;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : idx.entries) {
    nlohmann::ordered_json je;
    je["id"] = e.id;
    je["vector"] = e.vector;
    je["question"] = e.question;
    je["answer"] = e.answer;
    arr.push_back(std::move(je));
  }
  j["entries"] = std::move(arr);
  return j.dump() + '\n';
}

inline RetrievalIndex read_index(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RetrievalIndex idx;
    idx.dim = j.at("dim").get<int>();
    std::unordered_set<std::int64_t> seen;
    for (const auto& je : j.at("entries")) {
      IndexEntry e;
      e.id = je.at("id").get<std::int64_t>();
      e.vector = je.at("vector").get<std::vector<double>>();
      e.question = je.at("question").get<std::string>();
      e.answer = je.at("answer").get<int>();
      if (static_cast<int>(e.vector.size()) != idx.dim) throw FormatError("index entry vector length differs from dim");
      if (!seen.insert(e.id).second) throw FormatError("duplicate index id");
      idx.entries.push_back(std::move(e));
    }
    return idx;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed index: ") + e.what());
  }
}

}  // namespace openrft
