#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

namespace pdraft {

using Corpus = std::vector<std::vector<int>>;

enum class CorpusKind { markov, modular };

struct CorpusSpec {
  CorpusKind kind = CorpusKind::markov;
  int vocab = 512;  // id vocab - 1 is reserved for the mask token
  int count = 2000;
  int min_len = 32;
  int max_len = 64;
  std::uint64_t seed = 0;  // sequence sampling
  // Transition table of the Markov generator; held-out sets drawn with a
  // different `seed` but the same table come from the same distribution.
  std::uint64_t table_seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);

// Order-2 chain over ids 0..vocab-2. Each token b has four candidate
// successors; the weights over them are rotated by the class of the token
// before b, so the next-token distribution depends on both predecessors.
class MarkovTable {
 public:
  static constexpr std::array<double, 4> kWeights = {0.7, 0.15, 0.1, 0.05};

  MarkovTable(int vocab, std::uint64_t seed);

  int symbols() const { return symbols_; }
  int context_class(int a) const { return a % 4; }
  const std::array<int, 4>& successors(int b) const { return cand_[static_cast<std::size_t>(b)]; }
  double probability(int a, int b, int next) const;
  int sample(int a, int b, std::mt19937_64& rng) const;

 private:
  int symbols_ = 0;
  std::vector<std::array<int, 4>> cand_;
};

// Uniform draw in [0, 1) from the top 53 bits.
double unit_draw(std::mt19937_64& rng);

Corpus generate_corpus(const CorpusSpec& spec);

void write_jsonl(std::ostream& out, const Corpus& corpus);
void write_jsonl(const std::string& path, const Corpus& corpus);
// vocab > 0 rejects ids outside [0, vocab - 1) (the mask token included).
Corpus read_jsonl(std::istream& in, int vocab = 0);
Corpus read_jsonl(const std::string& path, int vocab = 0);

}  // namespace pdraft
