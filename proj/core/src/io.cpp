#include "sir3dmm/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

namespace sir3dmm::io {

namespace {

void append_raw(std::string& out, const void* data, size_t size) {
  out.append(static_cast<const char*>(data), size);
}

void append_u32(std::string& out, std::uint32_t v) { append_raw(out, &v, 4); }
void append_u64(std::string& out, std::uint64_t v) { append_raw(out, &v, 8); }
void append_f64(std::string& out, double v) { append_raw(out, &v, 8); }

void append_matrix(std::string& out, const Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) append_f64(out, m(i, j));
  }
}

void append_vec(std::string& out, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) append_f64(out, v(i));
}

struct Cursor {
  const std::string& data;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > data.size()) throw std::runtime_error("truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, data.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, data.data() + pos, 8);
    pos += 8;
    return v;
  }
  double f64() {
    need(8);
    double v;
    std::memcpy(&v, data.data() + pos, 8);
    pos += 8;
    return v;
  }
  void magic(const char* expected) {
    need(4);
    if (std::memcmp(data.data() + pos, expected, 4) != 0) {
      throw std::runtime_error(std::string("bad magic, expected ") + expected);
    }
    pos += 4;
  }
  Mat matrix(Eigen::Index rows, Eigen::Index cols) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = f64();
    }
    return m;
  }
  Vec vec(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = f64();
    return v;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void append_pose(std::string& out, const Pose& pose) {
  append_f64(out, pose.rotation.w());
  append_f64(out, pose.rotation.x());
  append_f64(out, pose.rotation.y());
  append_f64(out, pose.rotation.z());
  for (int i = 0; i < 3; ++i) append_f64(out, pose.translation3d(i));
  for (int i = 0; i < 2; ++i) append_f64(out, pose.translation2d(i));
  append_f64(out, pose.focal);
}

Pose read_pose(Cursor& c) {
  Pose pose;
  const double w = c.f64(), x = c.f64(), y = c.f64(), z = c.f64();
  pose.rotation = Eigen::Quaterniond(w, x, y, z);
  for (int i = 0; i < 3; ++i) pose.translation3d(i) = c.f64();
  for (int i = 0; i < 2; ++i) pose.translation2d(i) = c.f64();
  pose.focal = c.f64();
  return pose;
}

}  // namespace

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

void atomic_write_bytes(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void atomic_write_text(const std::string& path, const std::string& content) {
  atomic_write_bytes(path, content);
}

void write_model(const std::string& path, const MorphableModel& model) {
  std::string out;
  out.append("S3MM");
  append_u32(out, 1);
  append_u64(out, static_cast<std::uint64_t>(model.num_vertices()));
  append_u64(out, static_cast<std::uint64_t>(model.id_dims()));
  append_u64(out, static_cast<std::uint64_t>(model.expr_dims()));
  append_u64(out, static_cast<std::uint64_t>(model.landmark_indices.size()));
  append_u64(out, static_cast<std::uint64_t>(model.topology.size()));
  append_vec(out, model.mean_shape);
  append_matrix(out, model.shape_basis);
  append_matrix(out, model.expr_basis);
  append_vec(out, model.shape_eigenvalues);
  append_vec(out, model.expr_eigenvalues);
  for (const auto idx : model.landmark_indices) {
    append_u32(out, static_cast<std::uint32_t>(idx));
  }
  for (const auto& tri : model.topology) {
    for (const auto v : tri) append_u32(out, static_cast<std::uint32_t>(v));
  }
  atomic_write_bytes(path, out);
}

MorphableModel read_model(const std::string& path) {
  const std::string data = read_file(path);
  Cursor c{data};
  c.magic("S3MM");
  if (c.u32() != 1) throw std::runtime_error("unsupported model version");
  const auto n = static_cast<Eigen::Index>(c.u64());
  const auto m_id = static_cast<Eigen::Index>(c.u64());
  const auto m_exp = static_cast<Eigen::Index>(c.u64());
  const auto n_land = static_cast<Eigen::Index>(c.u64());
  const auto n_faces = static_cast<Eigen::Index>(c.u64());

  MorphableModel model;
  model.mean_shape = c.vec(3 * n);
  model.shape_basis = c.matrix(3 * n, m_id);
  model.expr_basis = c.matrix(3 * n, m_exp);
  model.shape_eigenvalues = c.vec(m_id);
  model.expr_eigenvalues = c.vec(m_exp);
  for (Eigen::Index i = 0; i < n_land; ++i) {
    model.landmark_indices.push_back(static_cast<std::int32_t>(c.u32()));
  }
  for (Eigen::Index i = 0; i < n_faces; ++i) {
    Triangle tri;
    for (auto& v : tri) v = static_cast<std::int32_t>(c.u32());
    model.topology.push_back(tri);
  }
  return model;
}

void write_vector_table(const std::string& path, const Mat& rows) {
  std::string out;
  out.append("S3VT");
  append_u32(out, 1);
  append_u64(out, static_cast<std::uint64_t>(rows.rows()));
  append_u64(out, static_cast<std::uint64_t>(rows.cols()));
  append_matrix(out, rows);
  atomic_write_bytes(path, out);
}

Mat read_vector_table(const std::string& path) {
  const std::string data = read_file(path);
  Cursor c{data};
  c.magic("S3VT");
  if (c.u32() != 1) throw std::runtime_error("unsupported vector table version");
  const auto rows = static_cast<Eigen::Index>(c.u64());
  const auto cols = static_cast<Eigen::Index>(c.u64());
  return c.matrix(rows, cols);
}

void write_regressor(const std::string& path, const LinearRegressor& reg) {
  std::string out;
  out.append("S3LR");
  append_u32(out, 1);
  append_u64(out, static_cast<std::uint64_t>(reg.weights.rows()));
  append_u64(out, static_cast<std::uint64_t>(reg.weights.cols()));
  append_matrix(out, reg.weights);
  append_vec(out, reg.bias);
  atomic_write_bytes(path, out);
}

LinearRegressor read_regressor(const std::string& path) {
  const std::string data = read_file(path);
  Cursor c{data};
  c.magic("S3LR");
  if (c.u32() != 1) throw std::runtime_error("unsupported regressor version");
  const auto out_dims = static_cast<Eigen::Index>(c.u64());
  const auto in_dims = static_cast<Eigen::Index>(c.u64());
  LinearRegressor reg;
  reg.weights = c.matrix(out_dims, in_dims);
  reg.bias = c.vec(out_dims);
  return reg;
}

void write_dataset(const std::string& path, const DatasetFile& ds) {
  const Eigen::Index m_id = ds.identity_codes.cols();
  Eigen::Index feature_dim = 0;
  Eigen::Index m_exp = 0;
  Eigen::Index n_land = 0;
  if (!ds.recog_samples.empty()) {
    feature_dim = ds.recog_samples.front().features.size();
    if (ds.recog_samples.front().expr.has_value()) {
      m_exp = ds.recog_samples.front().expr->values.size();
    }
  }
  if (!ds.recon_samples.empty()) {
    feature_dim = ds.recon_samples.front().features.size();
    if (ds.recon_samples.front().expr.has_value()) {
      m_exp = ds.recon_samples.front().expr->values.size();
    }
    n_land = ds.recon_samples.front().landmarks->points.rows();
  }

  std::string out;
  out.append("S3DS");
  append_u32(out, 1);
  append_u64(out, static_cast<std::uint64_t>(ds.identity_codes.rows()));
  append_u64(out, static_cast<std::uint64_t>(m_id));
  append_u64(out, static_cast<std::uint64_t>(m_exp));
  append_u64(out, static_cast<std::uint64_t>(feature_dim));
  append_u64(out, static_cast<std::uint64_t>(n_land));
  append_u64(out, ds.recog_samples.size());
  append_u64(out, ds.recon_samples.size());
  append_matrix(out, ds.identity_codes);

  auto require_ground_truth = [](const TrainSample& s) {
    if (!s.pose.has_value() || !s.expr.has_value()) {
      throw std::invalid_argument(
          "dataset writer requires pose and expression ground truth");
    }
  };
  for (const auto& s : ds.recog_samples) {
    require_ground_truth(s);
    if (!s.identity.has_value()) {
      throw std::invalid_argument("recognition sample without identity label");
    }
    append_vec(out, s.features);
    append_u32(out, static_cast<std::uint32_t>(*s.identity));
    append_pose(out, *s.pose);
    append_vec(out, s.expr->values);
  }
  for (const auto& s : ds.recon_samples) {
    require_ground_truth(s);
    if (!s.landmarks.has_value()) {
      throw std::invalid_argument("reconstruction sample without landmarks");
    }
    append_vec(out, s.features);
    for (Eigen::Index i = 0; i < s.landmarks->points.rows(); ++i) {
      append_f64(out, s.landmarks->points(i, 0));
      append_f64(out, s.landmarks->points(i, 1));
    }
    append_pose(out, *s.pose);
    append_vec(out, s.expr->values);
  }
  atomic_write_bytes(path, out);
}

DatasetFile read_dataset(const std::string& path) {
  const std::string data = read_file(path);
  Cursor c{data};
  c.magic("S3DS");
  if (c.u32() != 1) throw std::runtime_error("unsupported dataset version");
  const auto num_ids = static_cast<Eigen::Index>(c.u64());
  const auto m_id = static_cast<Eigen::Index>(c.u64());
  const auto m_exp = static_cast<Eigen::Index>(c.u64());
  const auto feature_dim = static_cast<Eigen::Index>(c.u64());
  const auto n_land = static_cast<Eigen::Index>(c.u64());
  const auto n_recog = c.u64();
  const auto n_recon = c.u64();

  DatasetFile ds;
  ds.identity_codes = c.matrix(num_ids, m_id);
  for (std::uint64_t i = 0; i < n_recog; ++i) {
    TrainSample s;
    s.features = c.vec(feature_dim);
    s.identity = static_cast<int>(c.u32());
    s.pose = read_pose(c);
    s.expr = ExpressionCode{c.vec(m_exp)};
    ds.recog_samples.push_back(std::move(s));
  }
  for (std::uint64_t i = 0; i < n_recon; ++i) {
    TrainSample s;
    s.features = c.vec(feature_dim);
    LandmarkSet lm;
    lm.points.resize(n_land, 2);
    for (Eigen::Index r = 0; r < n_land; ++r) {
      lm.points(r, 0) = c.f64();
      lm.points(r, 1) = c.f64();
    }
    s.landmarks = std::move(lm);
    s.pose = read_pose(c);
    s.expr = ExpressionCode{c.vec(m_exp)};
    ds.recon_samples.push_back(std::move(s));
  }
  return ds;
}

void write_dataset_summary_csv(const std::string& path, const DatasetFile& ds) {
  std::string out = "index,kind,label\n";
  size_t index = 0;
  for (const auto& s : ds.recog_samples) {
    out += std::to_string(index++) + ",recognition," +
           std::to_string(*s.identity) + "\n";
  }
  for (size_t i = 0; i < ds.recon_samples.size(); ++i) {
    out += std::to_string(index++) + ",reconstruction,\n";
  }
  atomic_write_text(path, out);
}

void write_obj(const std::string& path, const Mesh& mesh) {
  std::string out;
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i) {
    out += "v " + format_double(mesh.vertices(i, 0)) + " " +
           format_double(mesh.vertices(i, 1)) + " " +
           format_double(mesh.vertices(i, 2)) + "\n";
  }
  for (const auto& tri : mesh.faces) {
    out += "f " + std::to_string(tri[0] + 1) + " " + std::to_string(tri[1] + 1) +
           " " + std::to_string(tri[2] + 1) + "\n";
  }
  atomic_write_text(path, out);
}

Mesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Eigen::Vector3d> vertices;
  std::vector<Triangle> faces;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z)) throw std::runtime_error("malformed vertex line");
      vertices.emplace_back(x, y, z);
    } else if (tag == "f") {
      Triangle tri;
      for (auto& v : tri) {
        std::string token;
        if (!(ss >> token)) throw std::runtime_error("malformed face line");
        // tolerate v/vt/vn face syntax
        const size_t slash = token.find('/');
        if (slash != std::string::npos) token = token.substr(0, slash);
        const long idx = std::stol(token);
        if (idx <= 0 || static_cast<size_t>(idx) > vertices.size()) {
          throw std::runtime_error("face index out of range");
        }
        v = static_cast<std::int32_t>(idx - 1);
      }
      faces.push_back(tri);
    }
  }
  if (vertices.empty()) throw std::runtime_error("no vertices in " + path);
  Mesh mesh;
  mesh.vertices.resize(static_cast<Eigen::Index>(vertices.size()), 3);
  for (size_t i = 0; i < vertices.size(); ++i) {
    mesh.vertices.row(static_cast<Eigen::Index>(i)) = vertices[i].transpose();
  }
  mesh.faces = std::move(faces);
  return mesh;
}

void write_metrics_csv(const std::string& path,
                       const std::vector<EpochMetrics>& history) {
  std::string out =
      "epoch,stage,loss_total,loss_landmark,loss_sm,loss_center,loss_kl,"
      "intra_dist,inter_dist,norm_moment\n";
  auto opt = [](const std::optional<double>& v) {
    return v.has_value() ? format_double(*v) : std::string();
  };
  for (const auto& m : history) {
    out += std::to_string(m.epoch) + "," + std::to_string(m.stage) + "," +
           format_double(m.loss_total) + "," + opt(m.loss_landmark) + "," +
           opt(m.loss_sm) + "," + opt(m.loss_center) + "," + opt(m.loss_kl) +
           "," + format_double(m.intra_dist) + "," +
           format_double(m.inter_dist) + "," + format_double(m.norm_moment) +
           "\n";
  }
  atomic_write_text(path, out);
}

void write_roc_csv(const std::string& path, const VerificationReport& report) {
  std::string out = "threshold,tpr,fpr\n";
  for (const auto& p : report.roc) {
    out += format_double(p.threshold) + "," + format_double(p.tpr) + "," +
           format_double(p.fpr) + "\n";
  }
  atomic_write_text(path, out);
}

void write_ced_csv(const std::string& path, const CEDCurve& curve) {
  std::string out = "value,fraction\n";
  for (size_t i = 0; i < curve.values.size(); ++i) {
    out += format_double(curve.values[i]) + "," +
           format_double(curve.fractions[i]) + "\n";
  }
  atomic_write_text(path, out);
}

void write_errors_csv(const std::string& path, const std::vector<double>& errors) {
  std::string out = "error\n";
  for (const double e : errors) out += format_double(e) + "\n";
  atomic_write_text(path, out);
}

void write_distance_report_csv(const std::string& path, double e, double E,
                               double ratio) {
  std::string out = "e,E,ratio\n" + format_double(e) + "," + format_double(E) +
                    "," + format_double(ratio) + "\n";
  atomic_write_text(path, out);
}

PairsFile read_pairs_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  PairsFile pairs;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first && line.rfind("id_a", 0) == 0) {
      first = false;
      continue;  // header
    }
    first = false;
    std::istringstream ss(line);
    std::string a, b, s;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') ||
        !std::getline(ss, s, ',')) {
      throw std::runtime_error("malformed pairs row: " + line);
    }
    pairs.indices.push_back({std::stoi(a), std::stoi(b)});
    pairs.same.push_back(std::stoi(s) != 0);
  }
  if (pairs.indices.empty()) throw std::runtime_error("no pairs in " + path);
  return pairs;
}

void write_pairs_csv(const std::string& path, const PairsFile& pairs) {
  std::string out = "id_a,id_b,same\n";
  for (size_t i = 0; i < pairs.indices.size(); ++i) {
    out += std::to_string(pairs.indices[i][0]) + "," +
           std::to_string(pairs.indices[i][1]) + "," +
           (pairs.same[i] ? "1" : "0") + "\n";
  }
  atomic_write_text(path, out);
}

namespace {

using nlohmann::json;

double number_field(const json& obj, const std::string& key, double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number()) throw ConfigError(key, "expected a number");
  return obj[key].get<double>();
}

void reject_unknown(const json& obj, const std::vector<std::string>& allowed,
                    const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where.empty() ? key : where + "." + key,
                        "unknown field");
    }
  }
}

LossWeights parse_weights(const json& obj, const std::string& where) {
  reject_unknown(obj,
                 {"eps_l", "eps_s", "eps_reg", "eps_rega", "eps_id", "eps_exp",
                  "eps_uv", "eps_kl", "eps_c", "cosface_scale", "cosface_margin"},
                 where);
  LossWeights w;
  w.eps_l = number_field(obj, "eps_l", w.eps_l);
  w.eps_s = number_field(obj, "eps_s", w.eps_s);
  w.eps_reg = number_field(obj, "eps_reg", w.eps_reg);
  w.eps_rega = number_field(obj, "eps_rega", w.eps_rega);
  w.eps_id = number_field(obj, "eps_id", w.eps_id);
  w.eps_exp = number_field(obj, "eps_exp", w.eps_exp);
  w.eps_uv = number_field(obj, "eps_uv", w.eps_uv);
  w.eps_kl = number_field(obj, "eps_kl", w.eps_kl);
  w.eps_c = number_field(obj, "eps_c", w.eps_c);
  w.cosface_scale = number_field(obj, "cosface_scale", w.cosface_scale);
  w.cosface_margin = number_field(obj, "cosface_margin", w.cosface_margin);
  const auto nonneg = {w.eps_l, w.eps_s, w.eps_reg, w.eps_rega, w.eps_id,
                       w.eps_exp, w.eps_uv, w.eps_kl, w.eps_c};
  for (const double v : nonneg) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError(where, "loss weights must be finite and non-negative");
    }
  }
  if (w.cosface_scale <= 0.0) {
    throw ConfigError(where + ".cosface_scale", "must be positive");
  }
  if (w.cosface_margin < 0.0 || w.cosface_margin >= 1.0) {
    throw ConfigError(where + ".cosface_margin", "must lie in [0, 1)");
  }
  return w;
}

}  // namespace

TrainConfig parse_train_config(const std::string& json_text) {
  json obj;
  try {
    obj = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("json", e.what());
  }
  if (!obj.is_object()) throw ConfigError("json", "top level must be an object");
  reject_unknown(obj,
                 {"schema_version", "seed", "learning_rate", "batch_size",
                  "center_learning_rate", "lambda", "anchor_seed", "stages"},
                 "");
  if (!obj.contains("schema_version")) {
    throw ConfigError("schema_version", "missing");
  }
  if (!obj["schema_version"].is_number_integer() ||
      obj["schema_version"].get<int>() != 1) {
    throw ConfigError("schema_version", "must be 1");
  }

  TrainConfig cfg;
  if (obj.contains("seed")) {
    if (!obj["seed"].is_number_unsigned() && !obj["seed"].is_number_integer()) {
      throw ConfigError("seed", "expected an integer");
    }
    cfg.seed = obj["seed"].get<std::uint64_t>();
  }
  if (obj.contains("anchor_seed")) {
    cfg.anchor_seed = obj["anchor_seed"].get<std::uint64_t>();
  }
  cfg.learning_rate = number_field(obj, "learning_rate", cfg.learning_rate);
  if (cfg.learning_rate < 0.0) throw ConfigError("learning_rate", "must be >= 0");
  if (obj.contains("batch_size")) {
    if (!obj["batch_size"].is_number_integer()) {
      throw ConfigError("batch_size", "expected an integer");
    }
    cfg.batch_size = obj["batch_size"].get<int>();
    if (cfg.batch_size <= 0) throw ConfigError("batch_size", "must be positive");
  }
  cfg.center_learning_rate =
      number_field(obj, "center_learning_rate", cfg.center_learning_rate);
  if (cfg.center_learning_rate <= 0.0 || cfg.center_learning_rate > 1.0) {
    throw ConfigError("center_learning_rate", "must lie in (0, 1]");
  }
  cfg.lambda = number_field(obj, "lambda", cfg.lambda);
  if (cfg.lambda < 0.0) throw ConfigError("lambda", "must be >= 0");

  if (!obj.contains("stages") || !obj["stages"].is_array() ||
      obj["stages"].empty()) {
    throw ConfigError("stages", "need a non-empty array");
  }
  cfg.stages.clear();
  int stage_index = 0;
  for (const auto& s : obj["stages"]) {
    const std::string where = "stages[" + std::to_string(stage_index++) + "]";
    if (!s.is_object()) throw ConfigError(where, "expected an object");
    reject_unknown(s, {"name", "epochs", "landmark_term", "sir_term", "weights"},
                   where);
    StageConfig stage;
    if (s.contains("name")) {
      if (!s["name"].is_string()) throw ConfigError(where + ".name", "expected a string");
      stage.name = s["name"].get<std::string>();
    }
    if (!s.contains("epochs") || !s["epochs"].is_number_integer()) {
      throw ConfigError(where + ".epochs", "expected an integer");
    }
    stage.epochs = s["epochs"].get<int>();
    if (stage.epochs < 0) throw ConfigError(where + ".epochs", "must be >= 0");
    if (s.contains("landmark_term")) {
      if (!s["landmark_term"].is_boolean()) {
        throw ConfigError(where + ".landmark_term", "expected a boolean");
      }
      stage.landmark_term = s["landmark_term"].get<bool>();
    }
    if (s.contains("sir_term")) {
      if (!s["sir_term"].is_boolean()) {
        throw ConfigError(where + ".sir_term", "expected a boolean");
      }
      stage.sir_term = s["sir_term"].get<bool>();
    }
    if (s.contains("weights")) {
      if (!s["weights"].is_object()) {
        throw ConfigError(where + ".weights", "expected an object");
      }
      stage.weights = parse_weights(s["weights"], where + ".weights");
    }
    cfg.stages.push_back(std::move(stage));
  }
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  return parse_train_config(read_file(path));
}

}  // namespace sir3dmm::io
