#include "hybrid/tensor_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

namespace hybrid {

Json tensor_to_json(const MatrixXd& m) {
  Json data = Json::array();
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
}

Json tensor_to_json(const VectorXd& v) {
  Json data = Json::array();
  for (Index i = 0; i < v.size(); ++i) data.push_back(v(i));
  return {{"shape", {v.size()}}, {"data", std::move(data)}};
}

Json tensor_to_json(const std::vector<MatrixXd>& stack) {
  const Index rows = stack.empty() ? 0 : stack.front().rows();
  const Index cols = stack.empty() ? 0 : stack.front().cols();
  Json data = Json::array();
  for (const auto& m : stack) {
    require_shape(m.rows() == rows && m.cols() == cols, "stacked tensors must share a shape");
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) data.push_back(m(i, j));
  }
  return {{"shape", {static_cast<Index>(stack.size()), rows, cols}}, {"data", std::move(data)}};
}

namespace {

std::vector<Index> checked_shape(const Json& j) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("data"))
    throw ShapeError("tensor JSON needs \"shape\" and \"data\"");
  std::vector<Index> shape = j.at("shape").get<std::vector<Index>>();
  Index count = 1;
  for (Index s : shape) {
    require_shape(s >= 0, "tensor shape entries must be non-negative");
    count *= s;
  }
  require_shape(static_cast<Index>(j.at("data").size()) == count,
                "tensor data length does not match its shape");
  return shape;
}

}  // namespace

MatrixXd tensor_from_json(const Json& j) {
  const auto shape = checked_shape(j);
  const auto& data = j.at("data");
  if (shape.size() == 1) {
    MatrixXd m(shape[0], 1);
    for (Index i = 0; i < shape[0]; ++i) m(i, 0) = data[static_cast<std::size_t>(i)].get<double>();
    return m;
  }
  require_shape(shape.size() == 2, "expected a rank-1 or rank-2 tensor");
  MatrixXd m(shape[0], shape[1]);
  std::size_t at = 0;
  for (Index i = 0; i < shape[0]; ++i)
    for (Index c = 0; c < shape[1]; ++c) m(i, c) = data[at++].get<double>();
  return m;
}

std::vector<MatrixXd> tensor_stack_from_json(const Json& j) {
  const auto shape = checked_shape(j);
  require_shape(shape.size() == 3, "expected a rank-3 tensor");
  const auto& data = j.at("data");
  std::vector<MatrixXd> out;
  std::size_t at = 0;
  for (Index s = 0; s < shape[0]; ++s) {
    MatrixXd m(shape[1], shape[2]);
    for (Index i = 0; i < shape[1]; ++i)
      for (Index c = 0; c < shape[2]; ++c) m(i, c) = data[at++].get<double>();
    out.push_back(std::move(m));
  }
  return out;
}

void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

Json realization_to_json(const Realization& R) {
  check_realization(R);
  std::vector<MatrixXd> A(R.A.begin(), R.A.end());
  std::vector<MatrixXd> B, C;
  for (const auto& b : R.B) B.emplace_back(b);
  for (const auto& c : R.C) C.emplace_back(c.transpose());
  const Index T = R.horizon();
  MatrixXd Bm(T, R.state_dim), Cm(T, R.state_dim);
  for (Index t = 0; t < T; ++t) {
    Bm.row(t) = R.B[t];
    Cm.row(t) = R.C[t].transpose();
  }
  VectorXd D = Eigen::Map<const VectorXd>(R.D.data(), T);
  return {{"manifest",
           {{"n", R.state_dim}, {"T", T}, {"convention", std::string(to_string(R.convention))}}},
          {"A", tensor_to_json(A)},
          {"B", tensor_to_json(Bm)},
          {"C", tensor_to_json(Cm)},
          {"D", tensor_to_json(D)}};
}

Realization realization_from_json(const Json& j) {
  Realization R;
  const auto& manifest = j.at("manifest");
  R.state_dim = manifest.at("n").get<Index>();
  const Index T = manifest.at("T").get<Index>();
  R.convention = parse_convention(manifest.at("convention").get<std::string>());
  auto A = tensor_stack_from_json(j.at("A"));
  MatrixXd B = tensor_from_json(j.at("B")), C = tensor_from_json(j.at("C"));
  MatrixXd D = tensor_from_json(j.at("D"));
  require_shape(static_cast<Index>(A.size()) == T && D.rows() == T, "manifest horizon mismatch");
  R.A = std::move(A);
  for (Index t = 0; t < T; ++t) {
    R.B.push_back(R.state_dim == 0 ? RowVectorXd() : RowVectorXd(B.row(t)));
    R.C.push_back(R.state_dim == 0 ? VectorXd() : VectorXd(C.row(t).transpose()));
    R.D.push_back(D(t, 0));
  }
  check_realization(R);
  return R;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

CsvWriter::CsvWriter(std::ostream& out, const std::string& comment,
                     const std::vector<std::string>& header)
    : out_(out) {
  if (!comment.empty()) out_ << "# " << comment << '\n';
  for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
  out_ << '\n';
}

void CsvWriter::write_field(double x, bool& first) {
  separator(first);
  out_ << format_double(x);
}

void CsvWriter::write_field(const std::string& s, bool& first) {
  separator(first);
  out_ << s;
}

}  // namespace hybrid
