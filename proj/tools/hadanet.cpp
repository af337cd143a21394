// hadanet — command-line entry point for training, evaluating, benchmarking
// and analyzing block-wise Hadamard-binarized networks.
//
// Exit codes are stable API: 0 ok, 2 bad config, 3 missing/corrupt data,
// 4 training divergence, 5 corrupt model, 6 analysis failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "hadanet/analysis.hpp"
#include "hadanet/bench.hpp"
#include "hadanet/config.hpp"
#include "hadanet/dataset.hpp"
#include "hadanet/network.hpp"
#include "hadanet/serialize.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitModel = 5;
constexpr int kExitAnalysis = 6;

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const auto comma = s.find(',', pos);
    const std::string tok =
        s.substr(pos, comma == std::string::npos ? s.size() - pos
                                                 : comma - pos);
    out.push_back(static_cast<std::size_t>(std::stoul(tok)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw hadanet::ConfigError("empty list: " + s);
  return out;
}

// "1..8" expands to 1,2,...,8; otherwise a comma list.
std::vector<std::size_t> parse_grid(const std::string& s) {
  const auto dots = s.find("..");
  if (dots != std::string::npos) {
    const std::size_t lo = std::stoul(s.substr(0, dots));
    const std::size_t hi = std::stoul(s.substr(dots + 2));
    if (lo < 1 || hi < lo)
      throw hadanet::ConfigError("bad grid range: " + s);
    std::vector<std::size_t> out;
    for (std::size_t v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  return parse_size_list(s);
}

struct TrainFlags {
  std::string config_path;
  std::string out_model = "model.hdnt";
  std::string out_metrics = "metrics.csv";
  bool xnor_mode = false;
  // flag overrides; <0 / empty means "not given"
  int beta_w = -1, beta_a = -1, epochs = -1, batch = -1, workers = -1;
  int train_limit = -1, test_limit = -1;
  double lr = -1.0;
  long seed = -1;
  bool synthetic = false;
  bool packed = false;
  bool save_dense = false;
  std::string data_dir;
};

hadanet::TrainConfig resolve_config(const TrainFlags& f) {
  hadanet::KeyValues kv;
  if (!f.config_path.empty())
    kv = hadanet::KeyValues::from_file(f.config_path);
  hadanet::TrainConfig cfg = hadanet::TrainConfig::from_keyvalues(kv);
  if (f.beta_w >= 0) cfg.beta_w = f.beta_w;
  if (f.beta_a >= 0) cfg.beta_a = f.beta_a;
  if (f.epochs >= 0) cfg.epochs = f.epochs;
  if (f.batch >= 0) cfg.batch = f.batch;
  if (f.workers >= 0) cfg.workers = f.workers;
  if (f.lr >= 0) cfg.lr = static_cast<float>(f.lr);
  if (f.seed >= 0) cfg.seed = static_cast<std::uint64_t>(f.seed);
  if (f.synthetic) cfg.synthetic = true;
  if (f.packed) cfg.packed_inference = true;
  if (f.train_limit >= 0) cfg.train_limit = f.train_limit;
  if (f.test_limit >= 0) cfg.test_limit = f.test_limit;
  if (!f.data_dir.empty()) cfg.data_dir = f.data_dir;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainFlags& flags) {
  const hadanet::TrainConfig cfg = resolve_config(flags);
  auto [train_split, test_split] = hadanet::load_dataset(cfg);
  train_split = hadanet::truncate_split(
      std::move(train_split), static_cast<std::size_t>(cfg.train_limit));
  test_split = hadanet::truncate_split(
      std::move(test_split), static_cast<std::size_t>(cfg.test_limit));

  hadanet::Network net(hadanet::lenet_specs(cfg, flags.xnor_mode));
  net.init_params(cfg.seed);
  net.set_packed_inference(cfg.packed_inference);

  const hadanet::TrainResult result =
      hadanet::train(net, train_split, test_split, cfg, &std::cout);
  if (result.diverged) {
    std::cerr << "training diverged (non-finite loss) at epoch "
              << result.divergence_epoch << "\n";
    return kExitDivergence;
  }
  hadanet::save_model(net, flags.out_model, flags.save_dense);
  hadanet::write_metrics_csv(result.history, flags.out_metrics);
  std::printf("test_acc=%.4f\n", result.final_test_acc());
  return kExitOk;
}

struct EvalFlags {
  std::string model_path;
  std::string data_dir;
  bool synthetic = false;
  int batch = 256;
  int synthetic_test = 2000;
  long seed = 1;
  bool packed = false;
  int workers = 1;
};

int cmd_eval(const EvalFlags& f) {
  hadanet::Network net = hadanet::load_model(f.model_path);
  net.set_workers(f.workers);
  net.set_packed_inference(f.packed);
  hadanet::DataSplit test;
  if (f.synthetic) {
    test = hadanet::synthetic_digits(
        static_cast<std::size_t>(f.synthetic_test),
        static_cast<std::uint64_t>(f.seed) + 0x5EEDu);
  } else {
    auto [train_split, test_split] =
        hadanet::load_mnist(hadanet::resolve_data_dir(f.data_dir));
    (void)train_split;
    test = std::move(test_split);
  }
  const double acc =
      hadanet::evaluate(net, test, static_cast<std::size_t>(f.batch));
  std::printf("test_acc=%.4f\n", acc);
  return kExitOk;
}

int cmd_bench(const std::string& sizes_str, std::size_t beta, int repeats,
              long seed, int workers, const std::string& out_path) {
  const auto sizes = parse_size_list(sizes_str);
  const auto records = hadanet::bench_compare(
      sizes, beta, repeats, static_cast<std::uint64_t>(seed), workers);
  std::ofstream out(out_path);
  if (!out) throw hadanet::ConfigError("cannot write " + out_path);
  hadanet::write_bench_csv(records, out, repeats);
  for (const auto& r : records)
    std::printf("M=%zu %s median %.3f ms speedup %.2fx\n", r.m,
                r.kernel.c_str(), r.median_ns / 1e6, r.speedup);
  return kExitOk;
}

int cmd_angle(const std::string& betas_str, std::size_t n, int trials,
              long seed, const std::string& out_path) {
  const auto betas = parse_size_list(betas_str);
  const auto records = hadanet::angle_study(
      n, betas, trials, static_cast<std::uint64_t>(seed));
  std::ofstream out(out_path);
  if (!out) throw hadanet::ConfigError("cannot write " + out_path);
  hadanet::write_angle_csv(records, out);
  for (const auto& r : records)
    std::printf("beta=%zu mean=%.3f deg (± %.3f)\n", r.beta, r.mean_deg,
                r.stderr_deg);
  return kExitOk;
}

struct CorrelateFlags {
  std::string model_path;
  std::string grid = "1..8";
  std::string data_dir;
  bool synthetic = false;
  int batch = 256;
  long seed = 1;
  std::string out_path = "correlation.csv";
};

int cmd_correlate(const CorrelateFlags& f) {
  hadanet::Network net = hadanet::load_model(f.model_path);
  for (std::size_t idx : net.hada_layer_indices()) {
    auto* dense = dynamic_cast<hadanet::DenseLayer*>(net.layers()[idx].get());
    auto* conv = dynamic_cast<hadanet::ConvLayer*>(net.layers()[idx].get());
    if ((dense && dense->prebinarized()) || (conv && conv->prebinarized()))
      throw hadanet::AnalysisError(
          "correlate needs full-precision master weights; re-train or save "
          "the model dense (beta grid re-binarizes per cell)");
  }
  hadanet::DataSplit batch_src;
  if (f.synthetic) {
    batch_src = hadanet::synthetic_digits(
        static_cast<std::size_t>(f.batch),
        static_cast<std::uint64_t>(f.seed) + 0x5EEDu);
  } else {
    auto [train_split, test_split] =
        hadanet::load_mnist(hadanet::resolve_data_dir(f.data_dir));
    (void)train_split;
    batch_src = hadanet::truncate_split(std::move(test_split),
                                        static_cast<std::size_t>(f.batch));
  }
  const auto grid = parse_grid(f.grid);

  // beta_a is clamped per layer to the width of its incoming activation.
  const std::vector<std::size_t> widths =
      hadanet::hada_input_widths(net, batch_src.images);
  const auto records = hadanet::correlation_study(
      net, grid, grid, batch_src.images, widths);
  std::ofstream out(f.out_path);
  if (!out) throw hadanet::ConfigError("cannot write " + f.out_path);
  hadanet::write_correlation_csv(records, out);
  std::printf("wrote %zu grid cells to %s\n", records.size(),
              f.out_path.c_str());
  return kExitOk;
}

int cmd_memsize(const std::string& arch, std::size_t beta_w, std::size_t bits,
                const std::string& out_path) {
  std::vector<hadanet::ArchLayer> table;
  if (arch == "resnet18") {
    table = hadanet::resnet18_table();
  } else if (arch == "alexnet") {
    table = hadanet::alexnet_table();
  } else {
    throw hadanet::AnalysisError("unknown --arch (resnet18|alexnet): " + arch);
  }
  const hadanet::MemoryReport rep =
      hadanet::memory_saving(table, beta_w, bits);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw hadanet::ConfigError("cannot write " + out_path);
    hadanet::write_memory_csv(rep, out);
  }
  std::printf("%s beta_w=%zu X=%zu: %.2fx smaller than full precision\n",
              arch.c_str(), beta_w, bits, rep.ratio);
  return kExitOk;
}

int cmd_inspect(const std::string& model_path, bool as_json) {
  hadanet::Network net = hadanet::load_model(model_path);
  const hadanet::ModelSizeInfo info = hadanet::model_size_info(net);
  if (as_json) {
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : info.layers) {
      nlohmann::json row;
      row["index"] = l.index;
      row["kind"] = l.kind;
      row["shape"] = l.shape;
      row["beta_w"] = l.beta_w;
      row["beta_a"] = l.beta_a;
      row["params"] = l.params;
      row["stored_bytes"] = l.stored_bytes;
      row["dense_bytes"] = l.dense_bytes;
      row["packed"] = l.packed;
      j["layers"].push_back(row);
    }
    j["total_stored_bytes"] = info.total_stored;
    j["total_dense_bytes"] = info.total_dense;
    j["ratio"] = info.ratio;
    std::cout << j.dump(2) << "\n";
  } else {
    for (const auto& l : info.layers) {
      std::printf("%2zu %-10s %-14s beta_w=%-5zu beta_a=%-5zu %s%zu B (dense %zu B)\n",
                  l.index, l.kind.c_str(), l.shape.c_str(), l.beta_w,
                  l.beta_a, l.packed ? "packed " : "", l.stored_bytes,
                  l.dense_bytes);
    }
    std::printf("total %zu B vs dense %zu B -> %.2fx\n", info.total_stored,
                info.total_dense, info.ratio);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hadanet: block-wise Hadamard binarization toolkit"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "train a LeNet-class network");
  train->add_option("--config", tf.config_path, "key = value config file");
  train->add_option("--beta-w", tf.beta_w, "inner-layer weight aggression");
  train->add_option("--beta-a", tf.beta_a,
                    "inner-layer activation aggression");
  train->add_option("--epochs", tf.epochs, "training epochs");
  train->add_option("--batch", tf.batch, "minibatch size");
  train->add_option("--lr", tf.lr, "initial learning rate");
  train->add_option("--seed", tf.seed, "RNG seed");
  train->add_option("--workers", tf.workers, "worker cap (default 1)");
  train->add_option("--data", tf.data_dir, "MNIST IDX directory");
  train->add_flag("--synthetic", tf.synthetic,
                  "use the generated digit corpus instead of IDX files");
  train->add_flag("--xnor", tf.xnor_mode,
                  "degenerate full-row betas (one scale per row)");
  train->add_flag("--packed", tf.packed, "packed kernels for eval forwards");
  train->add_flag("--save-dense", tf.save_dense,
                  "store master weights dense (needed by `correlate`)");
  train->add_option("--train-limit", tf.train_limit,
                    "cap training samples (0 = all)");
  train->add_option("--test-limit", tf.test_limit,
                    "cap test samples (0 = all)");
  train->add_option("--out", tf.out_model, "model output path");
  train->add_option("--metrics", tf.out_metrics, "metrics CSV path");

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "evaluate a saved model");
  eval->add_option("--model", ef.model_path, "model file")->required();
  eval->add_option("--data", ef.data_dir, "MNIST IDX directory");
  eval->add_flag("--synthetic", ef.synthetic, "generated digit corpus");
  eval->add_option("--batch", ef.batch, "evaluation batch size");
  eval->add_option("--seed", ef.seed, "corpus seed (synthetic)");
  eval->add_option("--test-size", ef.synthetic_test,
                   "synthetic test samples");
  eval->add_flag("--packed", ef.packed, "packed kernels for dense layers");
  eval->add_option("--workers", ef.workers, "worker cap");

  std::string bench_sizes = "256,512,1024";
  std::size_t bench_beta = 16;
  int bench_repeats = 5;
  long bench_seed = 1;
  int bench_workers = 1;
  std::string bench_out = "bench.csv";
  auto* bench = app.add_subcommand("bench", "CMMA vs xHBNN matrix multiply");
  bench->add_option("--sizes", bench_sizes, "square extents, comma list");
  bench->add_option("--beta", bench_beta, "block size");
  bench->add_option("--repeats", bench_repeats, "timing repeats (median)");
  bench->add_option("--seed", bench_seed, "operand seed");
  bench->add_option("--workers", bench_workers, "worker count (pinned)");
  bench->add_option("--out", bench_out, "CSV output path");

  std::string angle_betas = "1,2,4,8,16,32";
  std::size_t angle_n = 4096;
  int angle_trials = 200;
  long angle_seed = 1;
  std::string angle_out = "angle.csv";
  auto* angle = app.add_subcommand(
      "angle", "angle between random vectors and their binarization");
  angle->add_option("--betas", angle_betas, "block sizes, comma list");
  angle->add_option("--n", angle_n, "vector length");
  angle->add_option("--trials", angle_trials, "trials per beta");
  angle->add_option("--seed", angle_seed, "RNG seed");
  angle->add_option("--out", angle_out, "CSV output path");

  CorrelateFlags cf;
  auto* correlate = app.add_subcommand(
      "correlate",
      "Pearson correlation of layer outputs across the beta grid");
  correlate->add_option("--model", cf.model_path, "model file (dense save)")
      ->required();
  correlate->add_option("--grid", cf.grid, "betas, e.g. 1..8 or 1,2,4,8");
  correlate->add_option("--data", cf.data_dir, "MNIST IDX directory");
  correlate->add_flag("--synthetic", cf.synthetic, "generated digit corpus");
  correlate->add_option("--batch", cf.batch, "evaluation batch size");
  correlate->add_option("--seed", cf.seed, "corpus seed (synthetic)");
  correlate->add_option("--out", cf.out_path, "CSV output path");

  std::string mem_arch = "resnet18";
  std::size_t mem_beta = 16;
  std::size_t mem_bits = 32;
  std::string mem_out;
  auto* memsize =
      app.add_subcommand("memsize", "model-size accounting for an arch table");
  memsize->add_option("--arch", mem_arch, "resnet18 | alexnet");
  memsize->add_option("--beta-w", mem_beta, "inner-layer weight aggression");
  memsize->add_option("--bits", mem_bits, "pack word width X (8/16/32/64)");
  memsize->add_option("--out", mem_out, "per-layer CSV output path");

  std::string inspect_model;
  bool inspect_json = false;
  auto* inspect = app.add_subcommand("inspect", "summarize a model file");
  inspect->add_option("--model", inspect_model, "model file")->required();
  inspect->add_flag("--json", inspect_json, "emit JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(tf);
    if (eval->parsed()) return cmd_eval(ef);
    if (bench->parsed())
      return cmd_bench(bench_sizes, bench_beta, bench_repeats, bench_seed,
                       bench_workers, bench_out);
    if (angle->parsed())
      return cmd_angle(angle_betas, angle_n, angle_trials, angle_seed,
                       angle_out);
    if (correlate->parsed()) return cmd_correlate(cf);
    if (memsize->parsed())
      return cmd_memsize(mem_arch, mem_beta, mem_bits, mem_out);
    if (inspect->parsed()) return cmd_inspect(inspect_model, inspect_json);
  } catch (const hadanet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const hadanet::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const hadanet::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const hadanet::ModelError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kExitModel;
  } catch (const hadanet::AnalysisError& e) {
    std::cerr << "analysis error: " << e.what() << "\n";
    return kExitAnalysis;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
