#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icot/error.hpp"

namespace icot {

// Fixed task vocabulary: digits, operators, and the separator specials.
// Ids are dense from 0; PAD is excluded from losses.
class Vocab {
 public:
  static const Vocab& instance();

  int id(const std::string& token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  int star() const { return star_; }
  int plus() const { return plus_; }
  int lparen() const { return lparen_; }
  int rparen() const { return rparen_; }
  int sep_cot() const { return sep_cot_; }
  int sep_ans() const { return sep_ans_; }
  int eos() const { return eos_; }
  int pad() const { return pad_; }

  std::vector<int> encode(const std::string& space_separated) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  Vocab();
  std::vector<std::string> tokens_;
  int star_, plus_, lparen_, rparen_, sep_cot_, sep_ans_, eos_, pad_;
};

// One multiplication instance. x = reversed digits of a, "*", reversed
// digits of b. z = SEP_COT then the worked partial products/sums. y = the
// reversed zero-padded product then EOS. SEP_ANS sits between z and y when
// sequences are assembled and is counted in neither.
struct MultExample {
  int64_t a = 0;
  int64_t b = 0;
  std::vector<int> x;
  std::vector<int> z;
  std::vector<int> y;
};

using Dataset = std::vector<MultExample>;

// Worked intermediate steps for a*b, low digits first, without the leading
// SEP_COT: partial products p_i = a*digit_i(b)*10^i reversed and padded to
// k1+i+1 digits, joined by "+", with running sums in parentheses after
// every "+" except the last.
std::vector<int> render_cot(int64_t a, int64_t b);

MultExample make_example(int64_t a, int64_t b, int k1, int k2);

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Uniform sampling of distinct (a,b) pairs with k1- and k2-digit factors;
// splits are disjoint and deterministic per seed.
DatasetSplits gen_dataset(int k1, int k2, int n_train, int n_val, int n_test,
                          uint64_t seed);

// Line format: "<x tokens>||<z tokens>||<y tokens>", space-separated
// surface strings, UTF-8, LF or CRLF.
void write_dataset(const std::string& path, const Dataset& set);
Dataset read_dataset(const std::string& path);

}  // namespace icot
