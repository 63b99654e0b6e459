#pragma once

/// @file
/// Standard-form conic program
///
///     minimize    <objective, vars>
///     subject to  <row_i, vars> = rhs_i          for every equality row
///                 X_k  PSD                      for every PSD block k
///                 n_j >= 0                      for every nonnegative scalar
///                 f_j free
///
/// together with SDPA sparse (".dat-s") import/export.
///
/// A coefficient attached to an off-diagonal PSD entry (k, i, j), i < j,
/// multiplies the single scalar X_k(i, j); the symmetric partner is implied.

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "koopsos/errors.hpp"
#include "koopsos/io.hpp"

namespace koopsos {

enum class VarKind { kFree, kNonneg, kPsd };

/// Reference to one scalar of the program. For PSD entries row <= col.
struct VarRef {
  VarKind kind = VarKind::kFree;
  int index = 0;  // variable index, or block index for kPsd
  int row = 0;
  int col = 0;

  static VarRef free(int i) { return {VarKind::kFree, i, 0, 0}; }
  static VarRef nonneg(int i) { return {VarKind::kNonneg, i, 0, 0}; }
  static VarRef psd(int block, int i, int j) {
    return {VarKind::kPsd, block, std::min(i, j), std::max(i, j)};
  }

  friend bool operator==(const VarRef&, const VarRef&) = default;
  friend bool operator<(const VarRef& a, const VarRef& b) {
    return std::tie(a.kind, a.index, a.row, a.col) < std::tie(b.kind, b.index, b.row, b.col);
  }
};

struct LinearTerm {
  VarRef var;
  double coef = 0.0;
};

struct LinearRow {
  std::vector<LinearTerm> terms;
  double rhs = 0.0;
};

struct SdpProblem {
  std::vector<int> psd_blocks;
  int free_vars = 0;
  int nonneg_vars = 0;
  std::vector<LinearRow> equalities;
  std::vector<LinearTerm> objective;

  int add_free() { return free_vars++; }
  int add_nonneg() { return nonneg_vars++; }
  int add_psd_block(int size) {
    psd_blocks.push_back(size);
    return static_cast<int>(psd_blocks.size()) - 1;
  }

  bool references_valid(const VarRef& v) const {
    switch (v.kind) {
      case VarKind::kFree:
        return v.index >= 0 && v.index < free_vars;
      case VarKind::kNonneg:
        return v.index >= 0 && v.index < nonneg_vars;
      case VarKind::kPsd:
        return v.index >= 0 && v.index < static_cast<int>(psd_blocks.size()) && v.row >= 0 &&
               v.row <= v.col && v.col < psd_blocks[static_cast<std::size_t>(v.index)];
    }
    return false;
  }

  void validate() const {
    for (int s : psd_blocks) {
      if (s < 1) throw InputError("SdpProblem: PSD block size must be >= 1");
    }
    if (free_vars < 0 || nonneg_vars < 0) throw InputError("SdpProblem: negative variable count");
    for (std::size_t i = 0; i < equalities.size(); ++i) {
      for (const auto& t : equalities[i].terms) {
        if (!references_valid(t.var)) {
          throw InputError("SdpProblem: equality " + std::to_string(i) + " references an undeclared variable");
        }
        if (!std::isfinite(t.coef)) throw InputError("SdpProblem: non-finite coefficient");
      }
      if (!std::isfinite(equalities[i].rhs)) throw InputError("SdpProblem: non-finite right-hand side");
    }
    for (const auto& t : objective) {
      if (!references_valid(t.var)) throw InputError("SdpProblem: objective references an undeclared variable");
    }
  }
};

// ---------------------------------------------------------------------------
// SDPA sparse format
//
// Our program is the SDPA "dual" side: max F0 . Y  s.t. F_i . Y = c_i, Y PSD,
// with F_i = row i, c = rhs and F0 = -objective. The optimal value of the
// file is therefore the negative of our minimum. Nonnegative scalars become
// 1x1 blocks; a free scalar becomes the difference of two 1x1 blocks.

inline std::string export_sdpa(const SdpProblem& problem) {
  problem.validate();
  std::vector<int> sizes = problem.psd_blocks;
  const int nonneg_base = static_cast<int>(sizes.size());
  for (int i = 0; i < problem.nonneg_vars; ++i) sizes.push_back(1);
  const int free_base = static_cast<int>(sizes.size());
  for (int i = 0; i < problem.free_vars; ++i) {
    sizes.push_back(1);
    sizes.push_back(1);
  }

  // (matrix number, block, i, j) -> value, 1-based block/i/j.
  std::map<std::tuple<int, int, int, int>, double> entries;
  auto emit = [&](int mat, const LinearTerm& t, double sign) {
    switch (t.var.kind) {
      case VarKind::kPsd: {
        const double v = t.var.row == t.var.col ? t.coef : 0.5 * t.coef;
        entries[{mat, t.var.index + 1, t.var.row + 1, t.var.col + 1}] += sign * v;
        break;
      }
      case VarKind::kNonneg:
        entries[{mat, nonneg_base + t.var.index + 1, 1, 1}] += sign * t.coef;
        break;
      case VarKind::kFree:
        entries[{mat, free_base + 2 * t.var.index + 1, 1, 1}] += sign * t.coef;
        entries[{mat, free_base + 2 * t.var.index + 2, 1, 1}] -= sign * t.coef;
        break;
    }
  };
  for (const auto& t : problem.objective) emit(0, t, -1.0);
  for (std::size_t i = 0; i < problem.equalities.size(); ++i) {
    for (const auto& t : problem.equalities[i].terms) emit(static_cast<int>(i) + 1, t, 1.0);
  }

  std::string out;
  out += std::to_string(problem.equalities.size()) + "\n";
  out += std::to_string(sizes.size()) + "\n";
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(sizes[i]);
  }
  out += "\n";
  for (std::size_t i = 0; i < problem.equalities.size(); ++i) {
    if (i) out += ' ';
    out += io::format_double(problem.equalities[i].rhs);
  }
  out += "\n";
  for (const auto& [key, v] : entries) {
    if (v == 0.0) continue;
    const auto& [mat, blk, i, j] = key;
    out += std::to_string(mat) + ' ' + std::to_string(blk) + ' ' + std::to_string(i) + ' ' +
           std::to_string(j) + ' ' + io::format_double(v) + "\n";
  }
  return out;
}

namespace detail {

/// Splits SDPA text into numeric tokens with their line numbers. Braces,
/// parentheses and commas act as separators; lines starting with '"' or '*'
/// are comments.
inline std::vector<std::vector<std::string>> sdpa_lines(const std::string& text,
                                                        std::vector<int>& line_numbers) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(text);
  std::string line;
  int no = 0;
  while (std::getline(in, line)) {
    ++no;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '"' || line[first] == '*') continue;
    for (char& ch : line) {
      if (ch == '{' || ch == '}' || ch == '(' || ch == ')' || ch == ',' || ch == '\t' || ch == '\r') ch = ' ';
    }
    std::istringstream ls(line);
    std::vector<std::string> toks;
    std::string tok;
    while (ls >> tok) toks.push_back(tok);
    if (toks.empty()) continue;
    out.push_back(std::move(toks));
    line_numbers.push_back(no);
  }
  return out;
}

inline int sdpa_int(const std::string& s, int line) {
  const double v = io::parse_double(s, "SDPA line " + std::to_string(line));
  if (v != std::floor(v)) throw InputError("SDPA line " + std::to_string(line) + ": expected integer, got " + s);
  return static_cast<int>(v);
}

}  // namespace detail

/// Parses SDPA sparse text. 1x1 blocks and diagonal (negative-size) blocks
/// become nonnegative scalars; larger blocks become PSD blocks.
inline SdpProblem import_sdpa(const std::string& text) {
  std::vector<int> nos;
  auto lines = detail::sdpa_lines(text, nos);
  std::size_t cursor = 0;
  // Header values may share lines; read them as a token stream.
  std::vector<std::pair<std::string, int>> header;
  auto next_token = [&](const char* what) -> std::pair<std::string, int> {
    while (header.empty()) {
      if (cursor >= lines.size()) throw InputError(std::string("SDPA: unexpected end of input reading ") + what);
      for (const auto& t : lines[cursor]) header.emplace_back(t, nos[cursor]);
      ++cursor;
    }
    auto t = header.front();
    header.erase(header.begin());
    return t;
  };

  auto [m_tok, m_line] = next_token("mDIM");
  const int m = detail::sdpa_int(m_tok, m_line);
  auto [nb_tok, nb_line] = next_token("nBLOCK");
  const int nblocks = detail::sdpa_int(nb_tok, nb_line);
  if (m < 0 || nblocks < 0) throw InputError("SDPA line " + std::to_string(m_line) + ": negative dimension");

  SdpProblem problem;
  struct BlockMap {
    VarKind kind;
    int first;  // PSD block index or first nonneg index
    int size;
  };
  std::vector<BlockMap> blocks;
  for (int b = 0; b < nblocks; ++b) {
    auto [tok, line] = next_token("blockStruct");
    const int s = detail::sdpa_int(tok, line);
    if (s == 0) throw InputError("SDPA line " + std::to_string(line) + ": zero block size");
    if (s == 1 || s < 0) {
      const int k = std::abs(s);
      blocks.push_back({VarKind::kNonneg, problem.nonneg_vars, -k});
      problem.nonneg_vars += k;
    } else {
      blocks.push_back({VarKind::kPsd, problem.add_psd_block(s), s});
    }
  }
  problem.equalities.resize(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    auto [tok, line] = next_token("c vector");
    problem.equalities[static_cast<std::size_t>(i)].rhs = io::parse_double(tok, "SDPA line " + std::to_string(line));
  }
  if (!header.empty()) {
    throw InputError("SDPA line " + std::to_string(header.front().second) + ": trailing tokens after c vector");
  }

  std::map<VarRef, double> objective;
  std::vector<std::map<VarRef, double>> rows(static_cast<std::size_t>(m));
  for (; cursor < lines.size(); ++cursor) {
    const auto& t = lines[cursor];
    const int line = nos[cursor];
    if (t.size() != 5) throw InputError("SDPA line " + std::to_string(line) + ": expected 5 fields");
    const int mat = detail::sdpa_int(t[0], line);
    const int blk = detail::sdpa_int(t[1], line);
    const int i = detail::sdpa_int(t[2], line);
    const int j = detail::sdpa_int(t[3], line);
    const double v = io::parse_double(t[4], "SDPA line " + std::to_string(line));
    if (mat < 0 || mat > m) throw InputError("SDPA line " + std::to_string(line) + ": matrix index out of range");
    if (blk < 1 || blk > nblocks) throw InputError("SDPA line " + std::to_string(line) + ": block index out of range");
    const auto& bm = blocks[static_cast<std::size_t>(blk - 1)];
    const int bsize = std::abs(bm.size);
    if (i < 1 || j < 1 || i > bsize || j > bsize) {
      throw InputError("SDPA line " + std::to_string(line) + ": entry index out of range");
    }
    VarRef ref;
    double coef = v;
    if (bm.kind == VarKind::kNonneg) {
      if (i != j) throw InputError("SDPA line " + std::to_string(line) + ": off-diagonal entry in diagonal block");
      ref = VarRef::nonneg(bm.first + i - 1);
    } else {
      ref = VarRef::psd(bm.first, i - 1, j - 1);
      if (i != j) coef = 2.0 * v;
    }
    if (mat == 0) {
      objective[ref] -= coef;
    } else {
      rows[static_cast<std::size_t>(mat - 1)][ref] += coef;
    }
  }
  for (const auto& [ref, c] : objective) {
    if (c != 0.0) problem.objective.push_back({ref, c});
  }
  for (int i = 0; i < m; ++i) {
    for (const auto& [ref, c] : rows[static_cast<std::size_t>(i)]) {
      if (c != 0.0) problem.equalities[static_cast<std::size_t>(i)].terms.push_back({ref, c});
    }
  }
  problem.validate();
  return problem;
}

}  // namespace koopsos
