#include <catch_amalgamated.hpp>

#include <set>

#include "openrft/data.hpp"
#include "openrft/reward.hpp"

using namespace openrft;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<Question> sample(int n, std::uint64_t seed, int k = 3) { return generate_dataset(TaskSpec::target(k), n, seed, 0); }

std::vector<Retrieved> brute_force(const RetrievalIndex& idx, std::string_view text, int k) {
  const auto q = embed(text, idx.dim);
  std::vector<Retrieved> all;
  for (const auto& e : idx.entries) all.push_back({e.id, cosine(q, e.vector)});
  std::sort(all.begin(), all.end(), [](const Retrieved& a, const Retrieved& b) {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
  });
  if (static_cast<int>(all.size()) > k) all.resize(static_cast<std::size_t>(k));
  return all;
}

}  // namespace

TEST_CASE("option relabeling") {
  const Question q = sample(1, 4)[0];
  const auto same = permute_options(q, {0, 1, 2, 3});
  CHECK(same.gold_letter == q.gold_letter);
  CHECK(same.options == q.options);

  Question a = q;
  a.gold_letter = 'A';
  const auto swapped = permute_options(a, {2, 1, 0, 3});
  CHECK(swapped.gold_letter == 'C');
  CHECK(swapped.options[2] == a.options[0]);
  CHECK(swapped.options[0] == a.options[2]);
  CHECK(swapped.options[1] == a.options[1]);
}

TEST_CASE("augmentation: six questions per original with unchanged semantics") {
  const auto qs = sample(50, 9, 4);
  const AugmentConfig cfg;
  const auto all = augment_dataset(qs, cfg, 21);
  CHECK(all.size() == 6 * qs.size());
  std::set<std::int64_t> ids;
  for (const auto& q : qs) ids.insert(q.id);
  int moved = 0;
  for (const auto& q : qs) {
    const auto vs = augment_question(q, cfg, 21);
    REQUIRE(vs.size() == 5);
    std::set<std::string> texts = {q.text};
    for (int v = 0; v < 5; ++v) {
      const auto& x = vs[static_cast<std::size_t>(v)];
      CHECK(x.v0 == q.v0);
      CHECK(x.ops == q.ops);
      CHECK(x.intermediates == q.intermediates);
      auto a = x.options, b = q.options;
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);
      CHECK(x.gold_value() == q.gold_value());
      REQUIRE(x.provenance);
      CHECK(x.provenance->origin_id == q.id);
      CHECK(x.provenance->variant_index == v + 1);
      CHECK(x.id == augmented_id(q.id, v + 1));
      CHECK(ids.insert(x.id).second);
      texts.insert(x.text);
      moved += x.gold_letter != q.gold_letter;
      const auto r = score_episode(x, x.intermediates, x.gold_letter, RewardConfig{});
      CHECK(r.outcome == 1);
      CHECK(r.combined == 1.0);
      for (int t = 1; t <= x.num_steps(); ++t) {
        const auto cs = Env{}.candidates(x, t);
        CHECK(std::count(cs.candidates.begin(), cs.candidates.end(), x.value_at(t)) == 1);
      }
    }
    CHECK(texts.size() == 6);
  }
  CHECK(moved > 0);
  CHECK(augment_dataset(qs, cfg, 21) == all);
  CHECK_FALSE(augment_dataset(qs, cfg, 22) == all);
}

TEST_CASE("augmentation config limits") {
  const Question q = sample(1, 1)[0];
  AugmentConfig cfg;
  cfg.n_variants = 0;
  CHECK(augment_question(q, cfg, 1).empty());
  cfg.n_variants = kNumTextTemplates;
  CHECK_THROWS_AS(augment_question(q, cfg, 1), ConfigError);
  cfg.n_variants = kNumTextTemplates - 1;
  CHECK(augment_question(q, cfg, 1).size() == static_cast<std::size_t>(kNumTextTemplates - 1));
  const auto v = augment_question(q, AugmentConfig{}, 1);
  CHECK_THROWS_AS(augment_question(v[0], AugmentConfig{}, 1), ConfigError);
}

TEST_CASE("corruption perturbs exactly one option value") {
  const auto qs = sample(200, 3);
  AugmentConfig cfg;
  cfg.corruption_prob = 1.0;
  for (const auto& q : qs) {
    for (const auto& x : augment_question(q, cfg, 5)) {
      REQUIRE(x.provenance);
      CHECK(x.provenance->corrupted);
      const auto clean = permute_options(q, x.provenance->permutation);
      int diffs = 0;
      for (int i = 0; i < kNumOptions; ++i) diffs += x.options[static_cast<std::size_t>(i)] != clean.options[static_cast<std::size_t>(i)];
      CHECK(diffs == 1);
      CHECK(std::set<int>(x.options.begin(), x.options.end()).size() == kNumOptions);
    }
  }
}

TEST_CASE("embedding") {
  const std::string x = "Start with 5. Then add 3, then multiply by 2.";
  CHECK(embed(x) == embed(x));
  CHECK_THAT(cosine(embed(x), embed(x)), WithinAbs(1.0, 1e-12));
  CHECK_THAT(std::sqrt(dot(embed(x), embed(x))), WithinAbs(1.0, 1e-9));
  CHECK(embed("") == std::vector<double>(kDefaultEmbeddingDim, 0.0));
  CHECK(embed("  ,, ") == std::vector<double>(kDefaultEmbeddingDim, 0.0));
  CHECK(tokenize("Add 3, THEN mul-2") == std::vector<std::string>{"add", "3", "then", "mul", "2"});
  CHECK(embed("ADD three") == embed("add, three!"));

  // token_bucket is FNV-1a-64 mod dim
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(token_bucket("a", 64) == static_cast<int>(0xaf63dc4c8601ec8cULL % 64));

  // disjoint-bucket fixture: enumerate tokens and split them by bucket
  std::vector<std::string> left, right;
  std::set<int> used_left;
  for (int i = 0; left.size() < 4 || right.size() < 4; ++i) {
    const std::string tok = "tok" + std::to_string(i);
    const int b = token_bucket(tok, kDefaultEmbeddingDim);
    if (b < kDefaultEmbeddingDim / 2 && left.size() < 4) {
      left.push_back(tok);
      used_left.insert(b);
    } else if (b >= kDefaultEmbeddingDim / 2 && right.size() < 4) {
      right.push_back(tok);
    }
  }
  std::string a, b;
  for (const auto& t : left) a += t + " ";
  for (const auto& t : right) b += t + " ";
  for (const auto& t : right) REQUIRE_FALSE(used_left.count(token_bucket(t, kDefaultEmbeddingDim)));
  CHECK(cosine(embed(a), embed(b)) == 0.0);
}

TEST_CASE("retrieval: hand cases") {
  const auto qs = sample(20, 2);
  const auto idx = build_index(qs);
  for (const auto& e : idx.entries) CHECK_THAT(std::sqrt(dot(e.vector, e.vector)), WithinAbs(1.0, 1e-9));
  const auto top = retrieve(idx, qs[7].text, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].score >= 1.0 - 1e-12);
  // an exact duplicate text can exist; the first hit always has the query's text
  CHECK(find_entry(idx, top[0].id)->question == qs[7].text);

  const auto all = retrieve(idx, qs[0].text, 100);
  CHECK(all.size() == qs.size());
  for (std::size_t i = 1; i < all.size(); ++i)
    CHECK((all[i - 1].score > all[i].score || (all[i - 1].score == all[i].score && all[i - 1].id < all[i].id)));

  CHECK(retrieve(RetrievalIndex{}, "anything", 3).empty());
  CHECK_THROWS_AS(retrieve(idx, "x", 0), ConfigError);
  CHECK(retrieve(idx, qs[3].text, 3, qs[3].id)[0].id != qs[3].id);

  // ties resolve by ascending id
  std::vector<Question> dup = {qs[0], qs[0], qs[0]};
  dup[0].id = 30;
  dup[1].id = 10;
  dup[2].id = 20;
  const auto tied = retrieve(build_index(dup), qs[0].text, 2);
  CHECK(tied[0].id == 10);
  CHECK(tied[1].id == 20);
  CHECK_THROWS_AS(build_index({qs[0], qs[0]}), ConfigError);
}

TEST_CASE("retrieval matches a brute-force scan") {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 30));
    auto qs = generate_dataset(TaskSpec::target(static_cast<int>(rng.uniform_int(1, 3))), n, rng.next(), 0);
    AugmentConfig ac;
    ac.n_variants = static_cast<int>(rng.uniform_int(0, 2));
    qs = augment_dataset(qs, ac, rng.next());
    const int dim = static_cast<int>(rng.uniform_int(4, 64));
    const auto idx = build_index(qs, dim);
    const std::string query = rng.uniform() < 0.5 ? qs[static_cast<std::size_t>(rng.uniform_int(0, n - 1))].text
                                                  : generate_question(TaskSpec::target(2), rng.next(), 0).text;
    const int k = static_cast<int>(rng.uniform_int(1, 8));
    const auto got = retrieve(idx, query, k);
    const auto want = brute_force(idx, query, k);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].id == want[i].id);
      CHECK_THAT(got[i].score, WithinAbs(want[i].score, 1e-12));
    }
  }
}

TEST_CASE("icl context blocks") {
  const auto qs = sample(12, 8);
  const auto idx = build_index(qs);
  const int D = idx.dim;
  const auto empty = icl_context(idx, std::vector<Retrieved>{}, 3, 1000);
  CHECK(empty.values == std::vector<double>(static_cast<std::size_t>(D + 3), 0.0));

  const std::vector<Retrieved> one = {{qs[4].id, 0.5}};
  const auto b1 = icl_context(idx, one, 3, 1000);
  REQUIRE(b1.values.size() == static_cast<std::size_t>(D + 3));
  for (int i = 0; i < D; ++i) CHECK(b1.values[static_cast<std::size_t>(i)] == idx.entries[4].vector[static_cast<std::size_t>(i)]);
  CHECK(b1.values[static_cast<std::size_t>(D)] == qs[4].gold_value() / 1000.0);
  CHECK(b1.values[static_cast<std::size_t>(D + 1)] == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Retrieved> r;
    std::vector<std::size_t> pick(qs.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(pick));
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 3));
    for (std::size_t i = 0; i < n; ++i) r.push_back({qs[pick[i]].id, rng.uniform()});
    const auto base = icl_context(idx, r, 3, 1000);
    rng.shuffle(std::span<Retrieved>(r));
    CHECK(icl_context(idx, r, 3, 1000) == base);
    for (double v : base.values) CHECK(std::abs(v) <= 1.0);
  }

  std::vector<Retrieved> four;
  for (int i = 0; i < 4; ++i) four.push_back({qs[static_cast<std::size_t>(i)].id, 0.0});
  CHECK_THROWS_AS(icl_context(idx, four, 3, 1000), ConfigError);
  CHECK_THROWS_AS(icl_context(idx, std::vector<Retrieved>{{999999, 0.0}}, 3, 1000), ConfigError);

  const auto ctx = build_contexts(idx, qs, 3, 1000);
  CHECK(ctx.size() == qs.size());
  for (const auto& [id, block] : ctx) CHECK(block.values.size() == static_cast<std::size_t>(D + 3));
}

TEST_CASE("index persistence round-trips") {
  const auto idx = build_index(augment_dataset(sample(10, 5), AugmentConfig{}, 1));
  const auto text = write_index(idx);
  CHECK(read_index(text) == idx);
  CHECK(write_index(read_index(text)) == text);
  CHECK_THROWS_AS(read_index("{\"dim\": 2}"), FormatError);
  CHECK_THROWS_AS(read_index("not json"), FormatError);
  CHECK_THROWS_AS(read_index(R"({"dim":2,"entries":[{"id":1,"vector":[1],"question":"q","answer":3}]})"), FormatError);
}
