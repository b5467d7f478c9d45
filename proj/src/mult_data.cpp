#include "icot/mult_data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_set>

namespace icot {

namespace {

int n_digits(int64_t v) {
  int n = 0;
  do {
    ++n;
    v /= 10;
  } while (v > 0);
  return n;
}

// Digits of v low-to-high, zero-padded to `width`.
std::vector<int> reversed_digits(int64_t v, int width) {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(width));
  for (int i = 0; i < width; ++i) {
    out.push_back(static_cast<int>(v % 10));
    v /= 10;
  }
  if (v != 0) {
    throw ContractError("value does not fit in " + std::to_string(width) + " digits");
  }
  return out;
}

int64_t pow10(int e) {
  int64_t v = 1;
  while (e-- > 0) v *= 10;
  return v;
}

}  // namespace

Vocab::Vocab() {
  for (int d = 0; d <= 9; ++d) tokens_.push_back(std::string(1, static_cast<char>('0' + d)));
  star_ = static_cast<int>(tokens_.size());
  tokens_.push_back("*");
  plus_ = static_cast<int>(tokens_.size());
  tokens_.push_back("+");
  lparen_ = static_cast<int>(tokens_.size());
  tokens_.push_back("(");
  rparen_ = static_cast<int>(tokens_.size());
  tokens_.push_back(")");
  sep_cot_ = static_cast<int>(tokens_.size());
  tokens_.push_back("<cot>");
  sep_ans_ = static_cast<int>(tokens_.size());
  tokens_.push_back("<ans>");
  eos_ = static_cast<int>(tokens_.size());
  tokens_.push_back("<eos>");
  pad_ = static_cast<int>(tokens_.size());
  tokens_.push_back("<pad>");
}

const Vocab& Vocab::instance() {
  static Vocab v;
  return v;
}

int Vocab::id(const std::string& token) const {
  for (size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == token) return static_cast<int>(i);
  }
  throw ContractError("unknown token '" + token + "'");
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw ContractError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& space_separated) const {
  std::vector<int> out;
  std::istringstream is(space_separated);
  std::string tok;
  while (is >> tok) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::vector<int> render_cot(int64_t a, int64_t b) {
  if (a <= 0 || b <= 0) throw ContractError("render_cot: factors must be positive");
  const int k1 = n_digits(a);
  const int k2 = n_digits(b);
  const Vocab& v = Vocab::instance();

  std::vector<int> out;
  int64_t running = 0;
  int64_t bb = b;
  for (int i = 0; i < k2; ++i) {
    int digit = static_cast<int>(bb % 10);
    bb /= 10;
    int64_t partial = a * digit * pow10(i);
    if (i > 0) out.push_back(v.plus());
    for (int d : reversed_digits(partial, k1 + i + 1)) out.push_back(d);
    running += partial;
    // Running sum in parentheses after every join except the last.
    if (i > 0 && i < k2 - 1) {
      out.push_back(v.lparen());
      for (int d : reversed_digits(running, k1 + i + 1)) out.push_back(d);
      out.push_back(v.rparen());
    }
  }
  return out;
}

MultExample make_example(int64_t a, int64_t b, int k1, int k2) {
  if (n_digits(a) != k1 || n_digits(b) != k2) {
    throw ContractError("factors " + std::to_string(a) + "," + std::to_string(b) +
                        " are not " + std::to_string(k1) + "x" + std::to_string(k2) +
                        " digits");
  }
  const Vocab& v = Vocab::instance();
  MultExample ex;
  ex.a = a;
  ex.b = b;
  ex.x = reversed_digits(a, k1);
  ex.x.push_back(v.star());
  for (int d : reversed_digits(b, k2)) ex.x.push_back(d);

  ex.z.push_back(v.sep_cot());
  for (int t : render_cot(a, b)) ex.z.push_back(t);

  ex.y = reversed_digits(a * b, k1 + k2);
  ex.y.push_back(v.eos());
  return ex;
}

DatasetSplits gen_dataset(int k1, int k2, int n_train, int n_val, int n_test,
                          uint64_t seed) {
  if (k1 < 1 || k2 < 1 || k1 > 9 || k2 > 9) {
    throw ContractError("gen_dataset: digit counts must be in [1,9]");
  }
  if (n_train < 0 || n_val < 0 || n_test < 0) {
    throw ContractError("gen_dataset: negative split size");
  }
  const int64_t lo1 = k1 == 1 ? 1 : pow10(k1 - 1);
  const int64_t lo2 = k2 == 1 ? 1 : pow10(k2 - 1);
  const int64_t cnt1 = pow10(k1) - lo1;
  const int64_t cnt2 = pow10(k2) - lo2;
  const int64_t capacity = cnt1 * cnt2;
  const int64_t total = static_cast<int64_t>(n_train) + n_val + n_test;
  if (total > capacity) {
    throw CapacityError("requested " + std::to_string(total) + " examples but only " +
                        std::to_string(capacity) + " distinct " + std::to_string(k1) +
                        "x" + std::to_string(k2) + "-digit pairs exist");
  }

  std::mt19937_64 rng(seed);
  std::vector<std::pair<int64_t, int64_t>> pairs;
  pairs.reserve(static_cast<size_t>(total));
  if (capacity <= 4'000'000) {
    // Enumerate and shuffle; exact uniformity over all pairs.
    std::vector<int64_t> idx(static_cast<size_t>(capacity));
    for (int64_t i = 0; i < capacity; ++i) idx[static_cast<size_t>(i)] = i;
    for (int64_t i = capacity - 1; i > 0; --i) {
      int64_t j = static_cast<int64_t>(rng() % static_cast<uint64_t>(i + 1));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    for (int64_t i = 0; i < total; ++i) {
      int64_t flat = idx[static_cast<size_t>(i)];
      pairs.emplace_back(lo1 + flat / cnt2, lo2 + flat % cnt2);
    }
  } else {
    // Sparse regime: rejection sampling of distinct pairs.
    std::unordered_set<uint64_t> seen;
    seen.reserve(static_cast<size_t>(total) * 2);
    while (static_cast<int64_t>(pairs.size()) < total) {
      int64_t a = lo1 + static_cast<int64_t>(rng() % static_cast<uint64_t>(cnt1));
      int64_t b = lo2 + static_cast<int64_t>(rng() % static_cast<uint64_t>(cnt2));
      uint64_t key = static_cast<uint64_t>(a) * 10'000'000'000ull + static_cast<uint64_t>(b);
      if (seen.insert(key).second) pairs.emplace_back(a, b);
    }
  }

  DatasetSplits out;
  for (int64_t i = 0; i < total; ++i) {
    auto [a, b] = pairs[static_cast<size_t>(i)];
    MultExample ex = make_example(a, b, k1, k2);
    if (i < n_train) {
      out.train.push_back(std::move(ex));
    } else if (i < n_train + n_val) {
      out.val.push_back(std::move(ex));
    } else {
      out.test.push_back(std::move(ex));
    }
  }
  return out;
}

void write_dataset(const std::string& path, const Dataset& set) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ContractError("cannot open '" + path + "' for writing");
  const Vocab& v = Vocab::instance();
  for (const auto& ex : set) {
    os << v.decode(ex.x) << "||" << v.decode(ex.z) << "||" << v.decode(ex.y) << "\n";
  }
  if (!os) throw ContractError("write to '" + path + "' failed");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("cannot open '" + path + "'");
  const Vocab& v = Vocab::instance();
  Dataset out;
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    size_t p1 = line.find("||");
    size_t p2 = p1 == std::string::npos ? std::string::npos : line.find("||", p1 + 2);
    if (p1 == std::string::npos || p2 == std::string::npos) {
      throw ParseError("expected '<x>||<z>||<y>'", lineno);
    }
    MultExample ex;
    try {
      ex.x = v.encode(line.substr(0, p1));
      ex.z = v.encode(line.substr(p1 + 2, p2 - p1 - 2));
      ex.y = v.encode(line.substr(p2 + 2));
    } catch (const ContractError& e) {
      throw ParseError(e.what(), lineno);
    }
    // Recover the factors from x: digits before '*' reversed, then after.
    size_t star = 0;
    while (star < ex.x.size() && ex.x[star] != v.star()) ++star;
    if (star == 0 || star + 1 >= ex.x.size()) {
      throw ParseError("input lacks 'a * b' structure", lineno);
    }
    for (size_t i = star; i-- > 0;) {
      if (ex.x[i] > 9) throw ParseError("non-digit in factor", lineno);
      ex.a = ex.a * 10 + ex.x[i];
    }
    for (size_t i = ex.x.size(); i-- > star + 1;) {
      if (ex.x[i] > 9) throw ParseError("non-digit in factor", lineno);
      ex.b = ex.b * 10 + ex.x[i];
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace icot
