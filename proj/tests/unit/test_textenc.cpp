#include <doctest.h>

#include <sstream>
#include <thread>

#include "efh/textenc/text_encoder.hpp"
#include "test_util.hpp"

using namespace efh;
using namespace efh::textenc;

namespace {

struct TextFixture {
  TextConfig cfg;
  ParamStore<float> store;
  TextFixture() { init_text_encoder(store, Init{3}, cfg); }
};

std::vector<float> row(const Tensor<float>& t, std::size_t r) {
  const std::size_t w = t.dim(1);
  return {t.raw() + r * w, t.raw() + (r + 1) * w};
}

}  // namespace

TEST_CASE("tokenize") {
  CHECK(tokenize("ab", 64) == std::vector<std::size_t>{kClsToken, 97, 98});
  CHECK(tokenize("hello", 64) == tokenize("hello", 64));
  const auto t = tokenize(std::string(200, 'x'), 64);
  CHECK(t.size() == 64);
  CHECK(t.front() == kClsToken);
  CHECK_THROWS_AS(tokenize("", 64), ArgumentError);
  CHECK_THROWS_AS(tokenize("  \t", 64), ArgumentError);
  CHECK(kClsToken != kPadToken);
  CHECK(kPadToken < kVocabSize);
}

TEST_CASE("encode_labels: per-label independence and cache contract") {
  TextFixture f;
  LanguageCache<float> cache;
  const auto a = encode_labels(f.store, f.cfg, {"cat", "dog"}, &cache);
  const auto b = encode_labels(f.store, f.cfg, {"dog", "cat"}, &cache);
  CHECK(row(a.embeddings, 0) == row(b.embeddings, 1));
  CHECK(row(a.embeddings, 1) == row(b.embeddings, 0));
  CHECK(cache.stats() == CacheStats{2, 2, 2, 0});
  const auto c = encode_labels(f.store, f.cfg, {"cat", "dog"}, &cache);
  CHECK(bit_identical(c.embeddings, a.embeddings));
  CHECK(cache.stats().hits == 4);

  const auto cold = encode_labels(f.store, f.cfg, {"cat"});
  CHECK(row(cold.embeddings, 0) == row(a.embeddings, 0));
  CHECK(a.names == std::vector<std::string>{"cat", "dog"});
  CHECK_THROWS_AS(encode_labels<float>(f.store, f.cfg, {}), ArgumentError);
  CHECK_THROWS_AS(encode_labels<float>(f.store, f.cfg, {"ok", ""}), ArgumentError);
}

TEST_CASE("encode_prompt: shape and whole-string keying") {
  TextFixture f;
  LanguageCache<float> cache;
  const std::string p = "Detect objects in cat, dog";
  const auto e = encode_prompt(f.store, f.cfg, p, &cache);
  CHECK(e.embeddings.dim(0) == tokenize(p, f.cfg.max_len).size());
  CHECK(e.embeddings.dim(1) == f.cfg.d_text);
  CHECK(e.valid.size() == e.embeddings.dim(0));
  const auto again = encode_prompt(f.store, f.cfg, p, &cache);
  CHECK(bit_identical(e.embeddings, again.embeddings));
  CHECK(cache.stats().misses == 1);
  encode_prompt(f.store, f.cfg, p + " and bird", &cache);
  CHECK(cache.stats().entries == 2);
  CHECK_THROWS_AS(encode_prompt(f.store, f.cfg, std::string(" "), &cache), ArgumentError);
}

TEST_CASE("label and prompt pathways do not influence each other") {
  TextFixture f;
  const std::vector<std::string> labels{"red circle", "blue square"};
  const auto alone = encode_labels(f.store, f.cfg, labels);
  encode_prompt(f.store, f.cfg, std::string("Where is the location of red circle"));
  const auto after = encode_labels(f.store, f.cfg, labels);
  CHECK(bit_identical(alone.embeddings, after.embeddings));
  const auto p1 = encode_prompt(f.store, f.cfg, std::string("find things"));
  encode_labels(f.store, f.cfg, {"green triangle"});
  CHECK(bit_identical(p1.embeddings, encode_prompt(f.store, f.cfg, std::string("find things")).embeddings));
}

TEST_CASE("in-graph label features equal the cached values") {
  TextFixture f;
  DiffContext<float> ctx(false);
  const std::vector<std::string> labels{"a", "bb", "ccc"};
  const Var<float> v = label_features(ctx, f.store, f.cfg, labels);
  CHECK(bit_identical(v.value(), encode_labels(f.store, f.cfg, labels).embeddings));
}

TEST_CASE("cache stats and LRU eviction") {
  LanguageCache<float> cache(2);
  CHECK(cache.stats() == CacheStats{0, 0, 0, 0});
  auto one = [] { return TensorF({1}, {1.0f}); };
  cache.get_or_compute(Role::label, "a", one);
  cache.get_or_compute(Role::label, "a", one);
  CHECK(cache.stats() == CacheStats{1, 1, 1, 0});

  cache.get_or_compute(Role::label, "b", one);
  cache.lookup(Role::label, "a");  // b is now least recent
  cache.get_or_compute(Role::label, "c", one);
  const auto s = cache.stats();
  CHECK(s.evictions == 1);
  CHECK(s.entries == 2);
  CHECK(cache.contains(Role::label, "a"));
  CHECK_FALSE(cache.contains(Role::label, "b"));
  CHECK(cache.contains(Role::label, "c"));

  // role is part of the key
  CHECK_FALSE(cache.contains(Role::prompt, "a"));
}

TEST_CASE("LRU property: the evicted key is always the least recently touched") {
  CounterRng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cap = 1 + rng.below(5);
    LanguageCache<float> cache(cap);
    std::vector<std::string> recency;  // front = oldest
    for (int step = 0; step < 40; ++step) {
      const std::string key = "k" + std::to_string(rng.below(9));
      auto it = std::find(recency.begin(), recency.end(), key);
      if (it != recency.end()) {
        CHECK(cache.lookup(Role::label, key) != nullptr);
        recency.erase(it);
      } else {
        std::string expected_victim;
        if (recency.size() == cap) {
          expected_victim = recency.front();
          recency.erase(recency.begin());
        }
        cache.insert(Role::label, key, TensorF({1}, 0.0f));
        if (!expected_victim.empty()) CHECK_FALSE(cache.contains(Role::label, expected_victim));
      }
      recency.push_back(key);
      REQUIRE(cache.stats().entries == recency.size());
    }
  }
}

TEST_CASE("cache transparency over random encode sequences") {
  TextFixture f;
  CounterRng rng(31);
  const std::vector<std::string> pool{"red circle", "blue square", "green triangle", "cat",
                                      "Detect objects in cat", "dog on a mat"};
  LanguageCache<float> cache(3);
  for (int step = 0; step < 60; ++step) {
    const std::string& s = pool[rng.below(pool.size())];
    if (rng.bernoulli(0.5)) {
      CHECK(bit_identical(encode_labels(f.store, f.cfg, {s}, &cache).embeddings,
                          encode_labels(f.store, f.cfg, {s}).embeddings));
    } else {
      CHECK(bit_identical(encode_prompt(f.store, f.cfg, s, &cache).embeddings,
                          encode_prompt(f.store, f.cfg, s).embeddings));
    }
  }
}

TEST_CASE("cache dump and load round trip") {
  TextFixture f;
  LanguageCache<float> cache;
  encode_labels(f.store, f.cfg, {"cat", "dog"}, &cache);
  encode_prompt(f.store, f.cfg, std::string("Detect objects in cat, dog"), &cache);
  std::stringstream ss;
  cache.dump(ss);
  LanguageCache<float> warm;
  CHECK(warm.load(ss) == 3);
  const auto s = warm.stats();
  CHECK(s.entries == 3);
  CHECK(s.hits == 0);
  const auto e = encode_labels(f.store, f.cfg, {"dog"}, &warm);
  CHECK(warm.stats().hits == 1);
  CHECK(bit_identical(e.embeddings, encode_labels(f.store, f.cfg, {"dog"}).embeddings));
  std::stringstream bad(std::string("\x07", 1));
  CHECK_THROWS_AS(warm.load(bad), FormatError);
}

TEST_CASE("concurrent readers and writers see whole values") {
  LanguageCache<float> cache(16);
  for (int k = 0; k < 8; ++k) cache.insert(Role::label, "k" + std::to_string(k), TensorF({64}, float(k)));
  std::atomic<bool> torn{false};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < 2000; ++i) {
        const int k = (i + t) % 12;
        const std::string key = "k" + std::to_string(k);
        if (t == 0 && i % 3 == 0) {
          cache.insert(Role::label, key, TensorF({64}, float(k)));
        } else if (auto v = cache.lookup(Role::label, key)) {
          for (float x : v->data()) {
            if (x != float(k)) torn = true;
          }
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  CHECK_FALSE(torn.load());
  const auto s = cache.stats();
  CHECK(s.entries <= 16);
  CHECK(s.hits + s.misses > 0);
}

TEST_CASE("freeze flags follow the configured layer count") {
  TextConfig cfg;
  cfg.frozen_layers = 1;
  ParamStore<float> store;
  init_text_encoder(store, Init{1}, cfg);
  CHECK_FALSE(store.trainable("text.tok_emb"));
  CHECK_FALSE(store.trainable("text.layer0.attn.q.w"));
  CHECK(store.trainable("text.layer1.attn.q.w"));
  cfg.frozen_layers = 0;
  apply_text_freeze(store, cfg);
  CHECK(store.trainable("text.tok_emb"));
  CHECK_FALSE(cfg.fully_frozen());
}
