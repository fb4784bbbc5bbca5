#include "fmrc/io.hpp"

#include "fmrc/errors.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fmrc::io {

static_assert(std::endian::native == std::endian::little, "FMRC1 I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'M', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("FMRC1: truncated file");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json standardizer_json(const Standardizer& s) {
  return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
          {"std", std::vector<double>(s.std.data(), s.std.data() + s.std.size())}};
}

Standardizer standardizer_from_json(const nlohmann::json& j) {
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("std").get<std::vector<double>>();
  Standardizer s;
  s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  s.std = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
  return s;
}

}  // namespace

std::string encode_fmrc1(const Fmrc1Record& record) {
  const std::uint32_t width = record.kind == RecordKind::Pairs ? 2 * record.dim : record.dim;
  if (record.rows.cols() != static_cast<Eigen::Index>(width)) throw InvalidArgument("FMRC1: row width mismatch");
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(record.kind));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(record.rows.rows()));
  put<std::uint32_t>(out, record.dim);
  put<std::uint32_t>(out, record.lag);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = record.rows;
  out.append(reinterpret_cast<const char*>(rm.data()), sizeof(double) * static_cast<std::size_t>(rm.size()));
  const std::string meta = record.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  return out;
}

Fmrc1Record decode_fmrc1(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(4) != std::string(kMagic, 4)) throw IoError("FMRC1: bad magic");
  if (in.get<std::uint32_t>() != kVersion) throw IoError("FMRC1: unsupported version");
  Fmrc1Record rec;
  const auto kind = in.get<std::uint32_t>();
  if (kind > 1) throw IoError("FMRC1: unknown record kind " + std::to_string(kind));
  rec.kind = static_cast<RecordKind>(kind);
  const auto rows = in.get<std::uint64_t>();
  rec.dim = in.get<std::uint32_t>();
  rec.lag = in.get<std::uint32_t>();
  const std::uint64_t width = rec.kind == RecordKind::Pairs ? 2ULL * rec.dim : rec.dim;
  if (width == 0 || rows > in.remaining() / (8 * width)) throw IoError("FMRC1: row block exceeds file size");
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, width);
  const std::string block = in.take(sizeof(double) * rows * width);
  std::memcpy(rm.data(), block.data(), block.size());
  rec.rows = rm;
  const auto meta_len = in.get<std::uint64_t>();
  if (meta_len != in.remaining()) throw IoError("FMRC1: metadata length mismatch");
  try {
    rec.metadata = nlohmann::json::parse(in.take(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("FMRC1: bad metadata: ") + e.what());
  }
  return rec;
}

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  Fmrc1Record rec;
  rec.kind = RecordKind::Trajectory;
  rec.dim = static_cast<std::uint32_t>(traj.dim());
  rec.rows = traj.points;
  rec.metadata = {{"seed", traj.origin.seed},
                  {"potential", traj.origin.potential},
                  {"transform", traj.origin.transform},
                  {"dt", traj.dt}};
  write_file(path, encode_fmrc1(rec));
}

Trajectory read_trajectory(const std::filesystem::path& path) {
  const auto rec = decode_fmrc1(read_file(path));
  if (rec.kind != RecordKind::Trajectory) throw IoError(path.string() + ": not a trajectory file");
  Trajectory t;
  t.points = rec.rows;
  t.dt = rec.metadata.value("dt", 0.0);
  t.origin.seed = rec.metadata.value("seed", std::uint64_t{0});
  t.origin.potential = rec.metadata.value("potential", std::string{});
  t.origin.transform = rec.metadata.value("transform", std::string{"none"});
  return t;
}

void write_pairs(const std::filesystem::path& path, const TransitionPairSet& pairs, nlohmann::json extra) {
  Fmrc1Record rec;
  rec.kind = RecordKind::Pairs;
  rec.dim = static_cast<std::uint32_t>(pairs.dim);
  rec.lag = static_cast<std::uint32_t>(pairs.lag_steps);
  rec.rows.resize(pairs.size(), 2 * pairs.dim);
  rec.rows << pairs.x, pairs.y;
  rec.metadata = extra.is_object() ? extra : nlohmann::json::object();
  rec.metadata["standardization"] = standardizer_json(pairs.normalization);
  write_file(path, encode_fmrc1(rec));
}

TransitionPairSet read_pairs(const std::filesystem::path& path) {
  const auto rec = decode_fmrc1(read_file(path));
  if (rec.kind != RecordKind::Pairs) throw IoError(path.string() + ": not a pair file");
  TransitionPairSet p;
  p.dim = static_cast<int>(rec.dim);
  p.lag_steps = static_cast<int>(rec.lag);
  p.x = rec.rows.leftCols(p.dim);
  p.y = rec.rows.rightCols(p.dim);
  if (rec.metadata.contains("standardization"))
    p.normalization = standardizer_from_json(rec.metadata.at("standardization"));
  else
    p.normalization = joint_standardizer(p.x, p.y);
  p.validate();
  return p;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m,
                      const std::vector<std::string>& header) {
  if (!header.empty() && static_cast<Eigen::Index>(header.size()) != m.cols())
    throw InvalidArgument("CSV header width mismatch");
  std::string out;
  for (std::size_t j = 0; j < header.size(); ++j) out += (j ? "," : "") + header[j];
  if (!header.empty()) out += "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += format_double(m(i, j));
    }
    out += '\n';
  }
  write_file(path, out);
}

void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj) {
  std::vector<std::string> header;
  for (int i = 0; i < traj.dim(); ++i) header.push_back("x" + std::to_string(i + 1));
  write_matrix_csv(path, traj.points, header);
}

void write_pairs_csv(const std::filesystem::path& path, const TransitionPairSet& pairs) {
  std::vector<std::string> header;
  for (int i = 0; i < pairs.dim; ++i) header.push_back("x" + std::to_string(i + 1));
  for (int i = 0; i < pairs.dim; ++i) header.push_back("y" + std::to_string(i + 1));
  Eigen::MatrixXd rows(pairs.size(), 2 * pairs.dim);
  rows << pairs.x, pairs.y;
  write_matrix_csv(path, rows, header);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace fmrc::io
