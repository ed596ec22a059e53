// sir3dmm command line tool: synthetic model/dataset generation, staged
// training, verification and alignment evaluation, and numeric self-checks.
//
// Exit codes: 0 success, 1 usage/config error, 2 numerical divergence.

#include "sir3dmm/evaluation.hpp"
#include "sir3dmm/io.hpp"
#include "sir3dmm/losses.hpp"
#include "sir3dmm/model.hpp"
#include "sir3dmm/param_geometry.hpp"
#include "sir3dmm/synthetic.hpp"
#include "sir3dmm/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <random>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sir3dmm;

namespace {

int cmd_gen(const std::string& out_dir, const SyntheticSpec& spec,
            int recon_count) {
  fs::create_directories(out_dir);
  const SyntheticModelResult built = build_synthetic_model(spec);
  if (built.shape_reduced) {
    std::cout << "warning: shape rank below request, reduced m_id from "
              << built.requested_m_id << " to " << built.model.id_dims() << "\n";
  }
  validate_model(built.model, /*strict=*/true);

  const SyntheticDataset ds = generate_identities(built.model, spec);
  io::DatasetFile file;
  file.identity_codes = ds.identity_codes;
  file.recog_samples = ds.recog_samples;
  file.recon_samples = make_reconstruction_samples(built.model, spec, recon_count);

  io::write_model(out_dir + "/model.s3mm", built.model);
  io::write_dataset(out_dir + "/dataset.s3ds", file);
  io::write_dataset_summary_csv(out_dir + "/dataset.csv", file);

  std::cout << "model: n=" << built.model.num_vertices()
            << " m_id=" << built.model.id_dims()
            << " m_exp=" << built.model.expr_dims()
            << " landmarks=" << built.model.num_landmarks() << "\n"
            << "dataset: identities=" << spec.num_identities
            << " recognition=" << file.recog_samples.size()
            << " reconstruction=" << file.recon_samples.size() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& model_path,
              const std::string& dataset_path, const std::string& out_dir) {
  const TrainConfig config = io::load_train_config(config_path);
  const MorphableModel model = io::read_model(model_path);
  const io::DatasetFile file = io::read_dataset(dataset_path);

  MixedDataset ds;
  ds.recon_samples = file.recon_samples;
  ds.recog_samples = file.recog_samples;

  fs::create_directories(out_dir);
  const TrainResult result = train(ds, model, config);
  io::write_regressor(out_dir + "/regressor.s3lr", result.regressor);
  io::write_vector_table(out_dir + "/centers.s3vt", result.centers.centers);
  io::write_metrics_csv(out_dir + "/metrics.csv", result.history);

  if (!result.history.empty()) {
    const auto& last = result.history.back();
    std::cout << "epochs=" << result.history.size()
              << " final_loss=" << io::format_double(last.loss_total)
              << " intra=" << io::format_double(last.intra_dist)
              << " inter=" << io::format_double(last.inter_dist) << "\n";
  } else {
    std::cout << "epochs=0 (initialization echoed)\n";
  }
  return 0;
}

int cmd_verify(const std::string& pairs_path, const std::string& codes_path,
               const std::string& metric_name, const std::string& out_dir) {
  const Mat codes = io::read_vector_table(codes_path);
  const io::PairsFile pairs_file = io::read_pairs_csv(pairs_path);

  VerificationMetric metric;
  if (metric_name == "euclidean") {
    metric = VerificationMetric::kEuclidean;
  } else if (metric_name == "cosine") {
    metric = VerificationMetric::kCosine;
  } else {
    std::cerr << "unknown metric '" << metric_name << "'\n";
    return 1;
  }

  std::vector<VerificationPair> pairs;
  for (size_t i = 0; i < pairs_file.indices.size(); ++i) {
    const auto [a, b] = pairs_file.indices[i];
    if (a < 0 || b < 0 || a >= codes.rows() || b >= codes.rows()) {
      std::cerr << "pair row " << i << " references a missing code id\n";
      return 1;
    }
    pairs.push_back({codes.row(a).transpose(), codes.row(b).transpose(),
                     pairs_file.same[i]});
  }
  const VerificationReport report = verification_accuracy(pairs, metric);

  fs::create_directories(out_dir);
  json summary;
  summary["metric"] = metric_name;
  summary["pairs"] = pairs.size();
  summary["accuracy"] = report.accuracy;
  summary["threshold"] = report.threshold;
  io::atomic_write_text(out_dir + "/verify.json", summary.dump(2) + "\n");
  io::write_roc_csv(out_dir + "/roc.csv", report);

  std::cout << "accuracy=" << io::format_double(report.accuracy)
            << " threshold=" << io::format_double(report.threshold) << "\n";
  return 0;
}

int cmd_rmse(const std::string& source_path, const std::string& target_path,
             const std::string& out_dir, int max_iters, double tol) {
  const Mesh source = io::read_obj(source_path);
  const Mesh target = io::read_obj(target_path);
  const AlignmentResult result = icp_align(source, target, max_iters, tol);

  fs::create_directories(out_dir);
  json summary;
  summary["rmse_point_to_plane"] = result.rmse_point_to_plane;
  summary["iterations"] = result.iterations;
  summary["converged"] = result.converged;
  summary["scale"] = result.transform.scale;
  summary["translation"] = {result.transform.translation(0),
                            result.transform.translation(1),
                            result.transform.translation(2)};
  json rot = json::array();
  for (int i = 0; i < 3; ++i) {
    rot.push_back({result.transform.rotation(i, 0), result.transform.rotation(i, 1),
                   result.transform.rotation(i, 2)});
  }
  summary["rotation"] = rot;
  summary["rmse_history"] = result.rmse_history;
  io::atomic_write_text(out_dir + "/alignment.json", summary.dump(2) + "\n");

  const std::vector<double> errors =
      point_to_plane_errors(result.transform.apply(source.vertices), target);
  io::write_errors_csv(out_dir + "/errors.csv", errors);

  std::cout << "rmse=" << io::format_double(result.rmse_point_to_plane)
            << " iterations=" << result.iterations
            << " converged=" << (result.converged ? "yes" : "no") << "\n";
  return 0;
}

int cmd_check(const std::string& inject_fault) {
  bool all_ok = true;
  auto report = [&](const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "[pass] " : "[FAIL] ") << name << ": " << detail << "\n";
    all_ok = all_ok && ok;
  };

  {
    const GradientCheckReport gc = gradient_check();
    for (const auto& c : gc.cases) {
      report("gradient." + c.name, c.max_rel_err <= 1e-4,
             "max rel err " + io::format_double(c.max_rel_err));
    }
  }

  {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int n = 100, m = 16;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Mat raw(3 * n, m);
      for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        for (Eigen::Index j = 0; j < raw.cols(); ++j) raw(i, j) = gauss(rng);
      }
      Mat basis = Eigen::HouseholderQR<Mat>(raw).householderQ() *
                  Mat::Identity(3 * n, m);
      if (trial == 0 && inject_fault == "basis-scale") {
        basis.col(0) *= 2.0;  // break the orthonormal invariant on purpose
      }
      MorphableModel model;
      model.mean_shape = Vec::Zero(3 * n);
      model.shape_basis = basis;
      model.expr_basis = Mat::Zero(3 * n, 0);
      model.shape_eigenvalues = Vec::Ones(m);
      model.expr_eigenvalues = Vec::Zero(0);
      ShapeCode x{Vec::NullaryExpr(m, [&](Eigen::Index) { return gauss(rng); })};
      ShapeCode y{Vec::NullaryExpr(m, [&](Eigen::Index) { return gauss(rng); })};
      const DistanceReport dr = verify_proportionality(model, x, y);
      worst = std::max(worst, std::abs(dr.ratio - 1.0));
    }
    report("proportionality", worst <= 1e-9,
           "max |ratio - 1| = " + io::format_double(worst));
  }

  {
    const int m = 8;
    const Vec sigma = Vec::LinSpaced(m, 0.5, 2.0);
    std::vector<ShapeCode> batch;
    for (int s = 0; s < 2; ++s) {
      const double sign = s == 0 ? 1.0 : -1.0;
      batch.push_back(ShapeCode{(sign * sigma.array()).matrix()});
    }
    const double at_unit = kl_to_standard_normal(batch, sigma).value;
    std::vector<ShapeCode> shrunk;
    for (const auto& c : batch) shrunk.push_back(ShapeCode{0.1 * c.values});
    const double at_shrunk = kl_to_standard_normal(shrunk, sigma).value;
    report("kl-identity",
           std::abs(at_unit) <= 1e-12 && at_shrunk > at_unit,
           "unit-moment KL " + io::format_double(at_unit) + ", shrunk KL " +
               io::format_double(at_shrunk));
  }

  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D morphable model toolkit with shape identity-aware "
               "regularization losses"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic model and dataset");
  std::string gen_out = "out";
  SyntheticSpec spec;
  int recon_count = -1;
  gen->add_option("--out-dir", gen_out, "Output directory");
  gen->add_option("--n-vertices", spec.n_vertices, "Vertex count");
  gen->add_option("--m-id", spec.m_id, "Identity basis width");
  gen->add_option("--m-exp", spec.m_exp, "Expression basis width");
  gen->add_option("--identities", spec.num_identities, "Identity count");
  gen->add_option("--samples-per-identity", spec.samples_per_identity,
                  "Samples per identity");
  gen->add_option("--noise-scale", spec.noise_scale,
                  "Within-identity code noise");
  gen->add_option("--recon-samples", recon_count,
                  "Reconstruction sample count (default: identities * samples)");
  gen->add_option("--seed", spec.seed, "Deterministic seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "Run the staged training loop");
  std::string train_config, train_model, train_dataset, train_out = "out";
  train_cmd->add_option("--config", train_config, "JSON config")->required();
  train_cmd->add_option("--model", train_model, "Model file (.s3mm)")->required();
  train_cmd->add_option("--dataset", train_dataset, "Dataset file (.s3ds)")
      ->required();
  train_cmd->add_option("--out-dir", train_out, "Output directory");

  // verify
  auto* verify_cmd =
      app.add_subcommand("verify", "Parameter-distance face verification");
  std::string verify_pairs, verify_codes, verify_metric = "euclidean",
                            verify_out = "out";
  verify_cmd->add_option("--pairs", verify_pairs, "Pairs CSV")->required();
  verify_cmd->add_option("--codes", verify_codes, "Codes table (.s3vt)")
      ->required();
  verify_cmd->add_option("--metric", verify_metric, "euclidean | cosine");
  verify_cmd->add_option("--out-dir", verify_out, "Output directory");

  // rmse
  auto* rmse_cmd =
      app.add_subcommand("rmse", "ICP alignment and point-to-plane RMSE");
  std::string rmse_source, rmse_target, rmse_out = "out";
  int rmse_iters = 50;
  double rmse_tol = 1e-10;
  rmse_cmd->add_option("--source", rmse_source, "Source OBJ")->required();
  rmse_cmd->add_option("--target", rmse_target, "Target OBJ")->required();
  rmse_cmd->add_option("--out-dir", rmse_out, "Output directory");
  rmse_cmd->add_option("--max-iters", rmse_iters, "Iteration cap");
  rmse_cmd->add_option("--tol", rmse_tol, "Convergence tolerance");

  // check
  auto* check_cmd =
      app.add_subcommand("check", "Gradient, proportionality and KL self-checks");
  std::string inject_fault;
  check_cmd
      ->add_option("--inject-fault", inject_fault,
                   "Test hook; 'basis-scale' breaks orthonormality on purpose")
      ->expected(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) {
      if (recon_count < 0) {
        recon_count = spec.num_identities * spec.samples_per_identity;
      }
      return cmd_gen(gen_out, spec, recon_count);
    }
    if (train_cmd->parsed()) {
      return cmd_train(train_config, train_model, train_dataset, train_out);
    }
    if (verify_cmd->parsed()) {
      return cmd_verify(verify_pairs, verify_codes, verify_metric, verify_out);
    }
    if (rmse_cmd->parsed()) {
      return cmd_rmse(rmse_source, rmse_target, rmse_out, rmse_iters, rmse_tol);
    }
    if (check_cmd->parsed()) {
      return cmd_check(inject_fault);
    }
  } catch (const io::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
