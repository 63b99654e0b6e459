#pragma once

/// @file
/// Extended dynamic mode decomposition for control-affine systems and the
/// finite-difference Lie derivative it induces.
///
/// From snapshot triples (x_k, u_k, y_k), y_k being the state tau time units
/// after (x_k, u_k), the fit solves
///
///     K = argmin ||Phi - K Psi||_F = Phi Psi^+,
///
/// with Phi = [phi(y_1) ... phi(y_n)] and Psi stacking psi(x_k) above
/// psi(x_k) u_{i,k} for every input i. K splits column-wise into A, B_1..B_m.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "koopsos/errors.hpp"
#include "koopsos/io.hpp"
#include "koopsos/polycore.hpp"

namespace koopsos {

/// Singular values below this fraction of the largest are treated as zero.
inline constexpr double kPseudoinverseCutoff = 1e-10;

/// Triples (x_k, u_k, y_k) stored column-wise.
struct SnapshotDataset {
  int state_dim = 1;
  int input_dim = 0;
  double tau = 1.0;
  Eigen::MatrixXd x;  // state_dim x n
  Eigen::MatrixXd u;  // input_dim x n
  Eigen::MatrixXd y;  // state_dim x n

  Eigen::Index size() const { return x.cols(); }

  void validate() const {
    if (state_dim < 1) throw InputError("SnapshotDataset: state_dim must be positive");
    if (input_dim < 0) throw InputError("SnapshotDataset: input_dim must be nonnegative");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InputError("SnapshotDataset: tau must be positive");
    if (x.rows() != state_dim || y.rows() != state_dim || u.rows() != input_dim) {
      throw InputError("SnapshotDataset: inconsistent row dimensions");
    }
    if (x.cols() != y.cols() || x.cols() != u.cols()) {
      throw InputError("SnapshotDataset: inconsistent snapshot counts");
    }
    if (x.cols() < 1) throw InputError("SnapshotDataset: empty dataset");
  }

  /// Concatenates snapshots of another dataset with identical metadata.
  void append(const SnapshotDataset& other) {
    if (other.state_dim != state_dim || other.input_dim != input_dim || other.tau != tau) {
      throw InputError("SnapshotDataset::append: metadata mismatch");
    }
    const Eigen::Index n = size();
    const Eigen::Index k = other.size();
    x.conservativeResize(state_dim, n + k);
    u.conservativeResize(input_dim, n + k);
    y.conservativeResize(state_dim, n + k);
    x.rightCols(k) = other.x;
    u.rightCols(k) = other.u;
    y.rightCols(k) = other.y;
  }
};

/// CSV body with header x_1..x_d,u_1..u_m,y_1..y_d.
inline std::string dataset_to_csv(const SnapshotDataset& data) {
  std::string out;
  auto header = [&](const char* p, int count) {
    for (int i = 1; i <= count; ++i) {
      if (!out.empty()) out += ',';
      out += p;
      out += std::to_string(i);
    }
  };
  header("x_", data.state_dim);
  header("u_", data.input_dim);
  header("y_", data.state_dim);
  out += '\n';
  for (Eigen::Index k = 0; k < data.size(); ++k) {
    bool first = true;
    auto put = [&](double v) {
      if (!first) out += ',';
      out += io::format_double(v);
      first = false;
    };
    for (int i = 0; i < data.state_dim; ++i) put(data.x(i, k));
    for (int i = 0; i < data.input_dim; ++i) put(data.u(i, k));
    for (int i = 0; i < data.state_dim; ++i) put(data.y(i, k));
    out += '\n';
  }
  return out;
}

inline nlohmann::json dataset_metadata(const SnapshotDataset& data) {
  return {{"state_dim", data.state_dim}, {"input_dim", data.input_dim}, {"tau", data.tau}};
}

inline SnapshotDataset dataset_from_csv(const std::string& csv, const nlohmann::json& meta) {
  SnapshotDataset data;
  try {
    data.state_dim = meta.at("state_dim").get<int>();
    data.input_dim = meta.at("input_dim").get<int>();
    data.tau = meta.at("tau").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("dataset metadata: ") + e.what());
  }
  const int d = data.state_dim;
  const int m = data.input_dim;
  const std::size_t width = static_cast<std::size_t>(2 * d + m);
  std::vector<std::vector<double>> rows;
  std::istringstream in(csv);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = io::split(line, ',');
    if (line_no == 1) {
      if (fields.size() != width) throw InputError("dataset CSV: header width does not match metadata");
      continue;
    }
    if (fields.size() != width) {
      throw InputError("dataset CSV line " + std::to_string(line_no) + ": expected " +
                       std::to_string(width) + " fields");
    }
    std::vector<double> r;
    r.reserve(width);
    for (auto f : fields) r.push_back(io::parse_double(f, "dataset CSV line " + std::to_string(line_no)));
    rows.push_back(std::move(r));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  data.x.resize(d, n);
  data.u.resize(m, n);
  data.y.resize(d, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& r = rows[static_cast<std::size_t>(k)];
    for (int i = 0; i < d; ++i) data.x(i, k) = r[static_cast<std::size_t>(i)];
    for (int i = 0; i < m; ++i) data.u(i, k) = r[static_cast<std::size_t>(d + i)];
    for (int i = 0; i < d; ++i) data.y(i, k) = r[static_cast<std::size_t>(d + m + i)];
  }
  data.validate();
  return data;
}

/// Writes `<stem>.csv` and `<stem>.json`.
inline void write_dataset(const std::string& stem, const SnapshotDataset& data) {
  io::write_file(stem + ".csv", dataset_to_csv(data));
  io::write_json(stem + ".json", dataset_metadata(data));
}

inline SnapshotDataset read_dataset(const std::string& stem) {
  return dataset_from_csv(io::read_file(stem + ".csv"), io::read_json(stem + ".json"));
}

/// p x n matrix whose column k is phi(y_k).
inline Eigen::MatrixXd assemble_phi(const SnapshotDataset& data, const Dictionary& phi) {
  data.validate();
  if (phi.dimension() != data.state_dim) throw InputError("assemble_phi: dictionary dimension mismatch");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(phi.size()), data.size());
  for (Eigen::Index k = 0; k < data.size(); ++k) out.col(k) = phi.evaluate(data.y.col(k));
  return out;
}

/// q(m+1) x n matrix; column k is [psi(x_k); psi(x_k) u_{1,k}; ...; psi(x_k) u_{m,k}].
inline Eigen::MatrixXd assemble_psi(const SnapshotDataset& data, const Dictionary& psi) {
  data.validate();
  if (psi.dimension() != data.state_dim) throw InputError("assemble_psi: dictionary dimension mismatch");
  const auto q = static_cast<Eigen::Index>(psi.size());
  Eigen::MatrixXd out(q * (data.input_dim + 1), data.size());
  for (Eigen::Index k = 0; k < data.size(); ++k) {
    const Eigen::VectorXd v = psi.evaluate(data.x.col(k));
    out.col(k).head(q) = v;
    for (int i = 0; i < data.input_dim; ++i) out.col(k).segment(q * (i + 1), q) = v * data.u(i, k);
  }
  return out;
}

struct KoopmanModel {
  Dictionary phi;
  Dictionary psi;
  double tau = 1.0;
  Eigen::MatrixXd a;               // p x q
  std::vector<Eigen::MatrixXd> b;  // m matrices, each p x q
  double fit_residual = 0.0;
  int svd_rank = 0;
  int psi_rows = 0;  // q (m + 1): rank is full when svd_rank == psi_rows
  Eigen::Index snapshots = 0;

  int input_dim() const { return static_cast<int>(b.size()); }
  bool full_rank() const { return svd_rank == psi_rows; }
};

inline KoopmanModel fit_koopman(const SnapshotDataset& data, const Dictionary& phi, const Dictionary& psi) {
  data.validate();
  const Eigen::MatrixXd big_phi = assemble_phi(data, phi);
  const Eigen::MatrixXd big_psi = assemble_psi(data, psi);

  Eigen::BDCSVD<Eigen::MatrixXd> svd(big_psi, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  if (s.size() == 0 || !(s[0] > 0.0) || !std::isfinite(s[0])) {
    throw NumericalError("fit_koopman: degenerate data, every singular value of Psi is zero");
  }
  const double cutoff = kPseudoinverseCutoff * s[0];
  Eigen::Index rank = 0;
  while (rank < s.size() && s[rank] > cutoff) ++rank;

  const auto& uu = svd.matrixU();
  const auto& vv = svd.matrixV();
  // K = Phi V_r S_r^{-1} U_r^T
  Eigen::MatrixXd pv = big_phi * vv.leftCols(rank);
  for (Eigen::Index j = 0; j < rank; ++j) pv.col(j) /= s[j];
  const Eigen::MatrixXd k = pv * uu.leftCols(rank).transpose();

  KoopmanModel model;
  model.phi = phi;
  model.psi = psi;
  model.tau = data.tau;
  const auto q = static_cast<Eigen::Index>(psi.size());
  model.a = k.leftCols(q);
  for (int i = 0; i < data.input_dim; ++i) model.b.emplace_back(k.middleCols(q * (i + 1), q));
  model.fit_residual = (big_phi - k * big_psi).norm();
  model.svd_rank = static_cast<int>(rank);
  model.psi_rows = static_cast<int>(big_psi.rows());
  model.snapshots = data.size();
  return model;
}

inline Eigen::MatrixXd stacked_k(const KoopmanModel& model) {
  const auto q = model.a.cols();
  Eigen::MatrixXd k(model.a.rows(), q * (model.input_dim() + 1));
  k.leftCols(q) = model.a;
  for (int i = 0; i < model.input_dim(); ++i) k.middleCols(q * (i + 1), q) = model.b[static_cast<std::size_t>(i)];
  return k;
}

namespace detail {
inline void check_lengths(const KoopmanModel& model, const Eigen::VectorXd& c, const Eigen::VectorXd* u) {
  if (static_cast<std::size_t>(c.size()) != model.phi.size()) {
    throw InputError("coefficient vector has length " + std::to_string(c.size()) + ", expected " +
                     std::to_string(model.phi.size()));
  }
  if (u != nullptr && u->size() != model.input_dim()) {
    throw InputError("input vector has length " + std::to_string(u->size()) + ", expected " +
                     std::to_string(model.input_dim()));
  }
}
}  // namespace detail

/// <c, A psi> + sum_i <c, B_i psi> u_i.
inline Polynomial apply_koopman(const KoopmanModel& model, const Eigen::VectorXd& c, const Eigen::VectorXd& u) {
  detail::check_lengths(model, c, &u);
  Eigen::VectorXd coeffs = model.a.transpose() * c;
  for (int i = 0; i < model.input_dim(); ++i) coeffs += u[i] * (model.b[static_cast<std::size_t>(i)].transpose() * c);
  return model.psi.combine(coeffs);
}

/// Data-driven Lie derivative operator (K~ phi - phi) / tau on span{phi}.
class LieModel {
 public:
  LieModel() = default;
  explicit LieModel(KoopmanModel koopman) : koopman_(std::move(koopman)) {}

  const KoopmanModel& koopman() const { return koopman_; }
  int dimension() const { return koopman_.phi.dimension(); }
  int input_dim() const { return koopman_.input_dim(); }

 private:
  KoopmanModel koopman_;
};

/// drift + sum_i inputs[i] * u_i: the control-affine split of a Lie derivative.
struct LieDecomposition {
  Polynomial drift;
  std::vector<Polynomial> inputs;

  Polynomial at(const Eigen::VectorXd& u) const {
    if (static_cast<std::size_t>(u.size()) != inputs.size()) throw InputError("LieDecomposition: input length mismatch");
    Polynomial p = drift;
    for (std::size_t i = 0; i < inputs.size(); ++i) p += inputs[i] * u[static_cast<Eigen::Index>(i)];
    return p;
  }
  /// Scales every component (used for V -> s V).
  LieDecomposition scaled(double s) const {
    LieDecomposition out{drift * s, {}};
    for (const auto& p : inputs) out.inputs.push_back(p * s);
    return out;
  }
};

inline Polynomial lie_apply(const LieModel& model, const Eigen::VectorXd& c, const Eigen::VectorXd& u) {
  const auto& k = model.koopman();
  detail::check_lengths(k, c, &u);
  return (apply_koopman(k, c, u) - k.phi.combine(c)) * (1.0 / k.tau);
}

inline LieDecomposition lie_affine_decomposition(const LieModel& model, const Eigen::VectorXd& c) {
  const auto& k = model.koopman();
  detail::check_lengths(k, c, nullptr);
  const double inv_tau = 1.0 / k.tau;
  LieDecomposition out{(k.psi.combine(k.a.transpose() * c) - k.phi.combine(c)) * inv_tau, {}};
  for (const auto& bi : k.b) out.inputs.push_back(k.psi.combine(bi.transpose() * c) * inv_tau);
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw InputError("matrix JSON: data length mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index jj = 0; jj < cols; ++jj) m(i, jj) = data[static_cast<std::size_t>(i * cols + jj)];
  }
  return m;
}

inline nlohmann::json to_json(const KoopmanModel& m) {
  nlohmann::json b = nlohmann::json::array();
  for (const auto& bi : m.b) b.push_back(matrix_to_json(bi));
  return {{"phi", to_json(m.phi)},
          {"psi", to_json(m.psi)},
          {"tau", m.tau},
          {"A", matrix_to_json(m.a)},
          {"B", b},
          {"diagnostics",
           {{"fit_residual", m.fit_residual},
            {"svd_rank", m.svd_rank},
            {"psi_rows", m.psi_rows},
            {"snapshots", m.snapshots}}}};
}

inline KoopmanModel koopman_from_json(const nlohmann::json& j) {
  try {
    KoopmanModel m;
    m.phi = dictionary_from_json(j.at("phi"));
    m.psi = dictionary_from_json(j.at("psi"));
    m.tau = j.at("tau").get<double>();
    m.a = matrix_from_json(j.at("A"));
    for (const auto& bi : j.at("B")) m.b.push_back(matrix_from_json(bi));
    const auto& d = j.at("diagnostics");
    m.fit_residual = d.at("fit_residual").get<double>();
    m.svd_rank = d.at("svd_rank").get<int>();
    m.psi_rows = d.at("psi_rows").get<int>();
    m.snapshots = d.at("snapshots").get<Eigen::Index>();
    const auto p = static_cast<Eigen::Index>(m.phi.size());
    const auto q = static_cast<Eigen::Index>(m.psi.size());
    if (m.a.rows() != p || m.a.cols() != q) throw InputError("model JSON: A has wrong shape");
    for (const auto& bi : m.b) {
      if (bi.rows() != p || bi.cols() != q) throw InputError("model JSON: B has wrong shape");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model JSON: ") + e.what());
  }
}

}  // namespace koopsos
