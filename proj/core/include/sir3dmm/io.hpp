#pragma once

#include "sir3dmm/evaluation.hpp"
#include "sir3dmm/model.hpp"
#include "sir3dmm/trainer.hpp"

#include <string>
#include <vector>

namespace sir3dmm::io {

/// Config parse failure that names the offending field.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& field_name, const std::string& why)
      : std::runtime_error("config field '" + field_name + "': " + why),
        field(field_name) {}
  std::string field;
};

// Model container (.s3mm): magic "S3MM", u32 version, u64 dimension header
// (n, m_id, m_exp, n_landmarks, n_faces), then little-endian f64 matrices in
// row-major order (mean, shape basis, expr basis, both eigenvalue vectors),
// u32 landmark indices and u32 face triples. Vertex components interleave as
// (x0, y0, z0, x1, ...).
void write_model(const std::string& path, const MorphableModel& model);
MorphableModel read_model(const std::string& path);

// Vector table (.s3vt): magic "S3VT", u32 version, u64 count, u64 dim, f64
// row-major data. Shape codes, identity centers and regressor-free code
// dumps all share this container.
void write_vector_table(const std::string& path, const Mat& rows);
Mat read_vector_table(const std::string& path);

// Linear regressor (.s3lr): magic "S3LR", u32 version, u64 out/in dims,
// f64 weights row-major, f64 bias.
void write_regressor(const std::string& path, const LinearRegressor& reg);
LinearRegressor read_regressor(const std::string& path);

/// Mixed synthetic dataset: ground-truth identity codes plus both sample
/// pools (.s3ds binary with a CSV sidecar summary).
struct DatasetFile {
  Mat identity_codes;
  std::vector<TrainSample> recog_samples;
  std::vector<TrainSample> recon_samples;
};

void write_dataset(const std::string& path, const DatasetFile& ds);
DatasetFile read_dataset(const std::string& path);
void write_dataset_summary_csv(const std::string& path, const DatasetFile& ds);

// Meshes travel as OBJ (v/f lines, 1-based indices).
void write_obj(const std::string& path, const Mesh& mesh);
Mesh read_obj(const std::string& path);

// Tabular outputs.
void write_metrics_csv(const std::string& path,
                       const std::vector<EpochMetrics>& history);
void write_roc_csv(const std::string& path, const VerificationReport& report);
void write_ced_csv(const std::string& path, const CEDCurve& curve);
void write_errors_csv(const std::string& path, const std::vector<double>& errors);
void write_distance_report_csv(const std::string& path, double e, double E,
                               double ratio);

/// Verification pairs: CSV rows "id_a,id_b,same" indexing a vector table.
struct PairsFile {
  std::vector<std::array<int, 2>> indices;
  std::vector<bool> same;
};
PairsFile read_pairs_csv(const std::string& path);
void write_pairs_csv(const std::string& path, const PairsFile& pairs);

/// Train config from JSON (schema_version 1). Unknown keys are rejected;
/// every LossWeights field has a default.
TrainConfig load_train_config(const std::string& path);
TrainConfig parse_train_config(const std::string& json_text);

/// Shortest-roundtrip decimal text for a double ("%.17g"); shared by every
/// CSV writer so outputs are reproducible byte for byte.
std::string format_double(double value);

/// Writes via a temp file in the same directory, then renames into place.
void atomic_write_text(const std::string& path, const std::string& content);
void atomic_write_bytes(const std::string& path, const std::string& content);

}  // namespace sir3dmm::io
