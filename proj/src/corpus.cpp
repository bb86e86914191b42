#include "pdraft/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>

#include "pdraft/errors.hpp"

namespace pdraft {

void CorpusSpec::validate() const {
  if (vocab < 6) throw ConfigError("corpus: vocab must be at least 6");
  if (count < 0) throw ConfigError("corpus: count must be non-negative");
  if (min_len < 2 || max_len < min_len) throw ConfigError("corpus: need 2 <= min_len <= max_len");
}

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = nlohmann::json{{"kind", s.kind == CorpusKind::markov ? "markov" : "modular"},
                     {"vocab", s.vocab},
                     {"count", s.count},
                     {"min_len", s.min_len},
                     {"max_len", s.max_len},
                     {"seed", s.seed},
                     {"table_seed", s.table_seed}};
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  if (j.contains("kind")) {
    const std::string k = j.at("kind").get<std::string>();
    if (k == "markov") {
      s.kind = CorpusKind::markov;
    } else if (k == "modular") {
      s.kind = CorpusKind::modular;
    } else {
      throw ConfigError("corpus: unknown generator '" + k + "'");
    }
  }
  s.vocab = j.value("vocab", s.vocab);
  s.count = j.value("count", s.count);
  s.min_len = j.value("min_len", s.min_len);
  s.max_len = j.value("max_len", s.max_len);
  s.seed = j.value("seed", s.seed);
  s.table_seed = j.value("table_seed", s.table_seed);
}

double unit_draw(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

namespace {

int draw_below(std::mt19937_64& rng, int n) {
  return static_cast<int>(unit_draw(rng) * n);
}

}  // namespace

MarkovTable::MarkovTable(int vocab, std::uint64_t seed) : symbols_(vocab - 1) {
  if (symbols_ < 5) throw ConfigError("markov: need at least 5 usable symbols");
  std::mt19937_64 rng(seed);
  cand_.resize(static_cast<std::size_t>(symbols_));
  for (auto& c : cand_) {
    for (std::size_t i = 0; i < c.size(); ++i) {
      int t;
      do {
        t = draw_below(rng, symbols_);
      } while (std::find(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(i), t) != c.begin() + static_cast<std::ptrdiff_t>(i));
      c[i] = t;
    }
  }
}

double MarkovTable::probability(int a, int b, int next) const {
  const auto& c = successors(b);
  const int shift = context_class(a);
  for (int i = 0; i < 4; ++i) {
    if (c[static_cast<std::size_t>(i)] == next) return kWeights[static_cast<std::size_t>((i - shift + 4) % 4)];
  }
  return 0.0;
}

int MarkovTable::sample(int a, int b, std::mt19937_64& rng) const {
  const auto& c = successors(b);
  const int shift = context_class(a);
  double u = unit_draw(rng);
  for (int r = 0; r < 4; ++r) {
    u -= kWeights[static_cast<std::size_t>(r)];
    if (u < 0.0 || r == 3) return c[static_cast<std::size_t>((r + shift) % 4)];
  }
  return c[0];
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const int symbols = spec.vocab - 1;
  std::mt19937_64 rng(spec.seed);
  Corpus out;
  out.reserve(static_cast<std::size_t>(spec.count));
  if (spec.kind == CorpusKind::markov) {
    const MarkovTable table(spec.vocab, spec.table_seed);
    for (int s = 0; s < spec.count; ++s) {
      const int len = spec.min_len + draw_below(rng, spec.max_len - spec.min_len + 1);
      std::vector<int> seq{draw_below(rng, symbols), draw_below(rng, symbols)};
      while (static_cast<int>(seq.size()) < len) seq.push_back(table.sample(seq[seq.size() - 2], seq.back(), rng));
      out.push_back(std::move(seq));
    }
  } else {
    // t_i = (t_{i-1} + t_{i-2} + step) mod symbols, with a per-sequence step.
    for (int s = 0; s < spec.count; ++s) {
      const int len = spec.min_len + draw_below(rng, spec.max_len - spec.min_len + 1);
      const int step = draw_below(rng, 4);
      std::vector<int> seq{draw_below(rng, symbols), draw_below(rng, symbols)};
      while (static_cast<int>(seq.size()) < len) {
        seq.push_back((seq[seq.size() - 2] + seq.back() + step) % symbols);
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

void write_jsonl(std::ostream& out, const Corpus& corpus) {
  for (const auto& seq : corpus) out << nlohmann::json(seq).dump() << '\n';
}

void write_jsonl(const std::string& path, const Corpus& corpus) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  write_jsonl(f, corpus);
  if (!f) throw IoError("failed writing '" + path + "'");
}

Corpus read_jsonl(std::istream& in, int vocab) {
  Corpus out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<int> seq;
    try {
      seq = nlohmann::json::parse(line).get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    if (vocab > 0) {
      for (int t : seq) {
        if (t < 0 || t >= vocab - 1) {
          throw VocabError("corpus line " + std::to_string(lineno) + ": token " + std::to_string(t) +
                           " is outside the usable vocabulary");
        }
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

Corpus read_jsonl(const std::string& path, int vocab) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  return read_jsonl(f, vocab);
}

}  // namespace pdraft
