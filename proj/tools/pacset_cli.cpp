/*
 * Copyright (c) 2026, The pacset authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <pacset/pacset.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace pacset;
using nlohmann::json;

enum Exit { kOk = 0, kValidation = 1, kIo = 2, kCorruption = 3 };

struct LayoutFlags {
  std::string layout = "bin_block_wdfs";
  std::uint32_t block_bytes = 65536;
  std::uint32_t bin_depth = 2;
  std::uint32_t trees_per_bin = 0;

  LayoutConfig config() const {
    LayoutConfig c;
    c.layout = parse_layout(layout);
    c.block_bytes = block_bytes;
    c.bin_depth = bin_depth;
    if (trees_per_bin) c.trees_per_bin = trees_per_bin;
    return c;
  }
};

struct SyntheticFlags {
  bool enabled = false;
  std::uint32_t trees = 128;
  std::uint32_t depth = 12;
  std::string skew = "geometric";
  std::string task = "classify";
  std::string kind = "rf";
  std::uint32_t features = 32;
  std::uint32_t classes = 10;
};

struct WorkloadFlags {
  std::string observations;
  std::size_t num_obs = 1000;
  std::uint32_t repetitions = 1;
  bool warm = false;
};

struct Options {
  std::string model;
  std::string packed;
  std::string out;
  std::string trace;
  std::string format = "json";
  std::string store = "file";
  std::string mode = "sequential";
  std::uint32_t nodes_per_value = 8;
  bool kv_cache = false;
  std::uint32_t expect_block_bytes = 0;
  std::uint64_t seed = 1;
  std::vector<std::uint32_t> depths{1, 2, 3, 4};
  std::vector<std::string> sizes{"1", "4", "8", "16", "64", "all"};
  std::string observations_out;
  LayoutFlags layout;
  SyntheticFlags synthetic;
  WorkloadFlags workload;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to the named file, or stdout when the path is empty or "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_.open(path, std::ios::binary | std::ios::trunc);
    if (!file_) throw IoError("cannot create '" + path + "'");
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }
  void close() {
    if (!file_.is_open()) return;
    file_.close();
    if (file_.fail()) throw IoError("write failed");
  }

 private:
  std::ofstream file_;
};

Task parse_task(const std::string& s) { return s == "regress" ? Task::regress : Task::classify; }
EnsembleKind parse_kind(const std::string& s) {
  return s == "gbt" ? EnsembleKind::gradient_boosted : EnsembleKind::random_forest;
}

SyntheticSpec synthetic_spec(const Options& o) {
  SyntheticSpec s;
  s.seed = o.seed;
  s.num_trees = o.synthetic.trees;
  s.depth = o.synthetic.depth;
  s.skew = parse_skew(o.synthetic.skew);
  s.task = parse_task(o.synthetic.task);
  s.kind = parse_kind(o.synthetic.kind);
  s.num_features = o.synthetic.features;
  s.num_classes = o.synthetic.classes;
  return s;
}

struct Source {
  Forest forest;
  std::optional<ObservationSampler> sampler;
};

Source load_source(const Options& o) {
  if (o.synthetic.enabled == !o.model.empty()) throw ValidationError("give exactly one of --model and --synthetic");
  if (o.synthetic.enabled) {
    auto s = generate_synthetic_forest(synthetic_spec(o));
    return {std::move(s.forest), s.sampler};
  }
  return {annotate_cardinalities(parse_model(read_text(o.model))), std::nullopt};
}

void check_rows(const std::vector<std::vector<double>>& rows, std::uint32_t num_features) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != num_features) {
      throw ValidationError("observation row " + std::to_string(i + 1) + " has " + std::to_string(rows[i].size()) +
                            " features, model expects " + std::to_string(num_features));
    }
  }
}

WorkloadSpec load_workload(const Options& o, const Source& src) {
  WorkloadSpec w;
  if (!o.workload.observations.empty()) {
    w.observations = read_observations(o.workload.observations);
  } else if (src.sampler) {
    w.observations = src.sampler->sample(o.workload.num_obs, o.seed + 1);
  } else {
    throw ValidationError("--observations is required unless the forest is synthetic");
  }
  check_rows(w.observations, src.forest.num_features);
  w.repetitions = o.workload.repetitions;
  w.cold_start = !o.workload.warm;
  return w;
}

std::string hex(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

int cmd_pack(const Options& o) {
  const auto cfg = o.layout.config();
  validate(cfg);
  if (o.model.empty() && !o.synthetic.enabled) throw ValidationError("--model is required");
  const auto src = load_source(o);
  const auto model = pack(src.forest, cfg);
  const auto bytes = encode(model);

  std::size_t inexact = 0;
  for (const auto& tree : src.forest.trees) {
    for (const auto& n : tree.nodes) {
      if (!n.is_leaf() && static_cast<double>(static_cast<float>(n.threshold)) != n.threshold) ++inexact;
    }
  }
  if (inexact) std::cerr << "warning: " << inexact << " thresholds rounded to single precision\n";

  write_file(o.out, bytes);
  const auto& h = model.header;
  std::size_t records = 0;
  for (const auto& r : model.nodes) records += !r.is_padding() && !r.is_sentinel();
  const auto body_slots = model.total_blocks() * h.nodes_per_block();
  const auto filler = body_slots - records;
  std::cout << "layout " << to_string(h.layout) << "\n"
            << "trees " << h.num_trees << "\n"
            << "bins " << h.num_bins() << " (depth " << h.bin_depth << ", " << h.trees_per_bin << " trees per bin)\n"
            << "blocks " << model.total_blocks() << " of " << h.block_bytes << " bytes\n"
            << "records " << records << "\n"
            << "padding " << filler * kNodeBytes << " bytes (" << std::fixed << std::setprecision(1)
            << (body_slots ? 100.0 * static_cast<double>(filler) / static_cast<double>(body_slots) : 0.0)
            << "%)\n"
            << "file " << bytes.size() << " bytes, fingerprint " << hex(fingerprint(bytes)) << "\n";
  return kOk;
}

std::unique_ptr<BlockStore> open_store(const Options& o) {
  const std::optional<std::uint32_t> expected =
      o.expect_block_bytes ? std::optional<std::uint32_t>(o.expect_block_bytes) : std::nullopt;
  if (o.store == "file") return std::make_unique<FileStore>(open_file_store(o.packed, expected));
  if (o.store == "mmap") return std::make_unique<FileStore>(open_file_store(o.packed, expected, FileStore::Mode::mapped));
  KvStoreConfig cfg;
  cfg.nodes_per_value = o.nodes_per_value;
  cfg.per_inference_cache = o.kv_cache;
  auto kv = std::make_unique<KvStore>(open_kv_store(read_file(o.packed), cfg));
  if (expected && kv->header().block_bytes != *expected) {
    throw FormatError("packed file uses " + std::to_string(kv->header().block_bytes) + "-byte blocks, expected " +
                      std::to_string(*expected));
  }
  return kv;
}

int cmd_infer(const Options& o) {
  auto rows = read_observations(o.workload.observations);
  const auto store = open_store(o);
  check_rows(rows, store->header().num_features);
  InferenceOptions opts;
  opts.cold_start = !o.workload.warm;
  const auto mode = o.mode == "per_bin_parallel" ? BatchMode::per_bin_parallel : BatchMode::sequential;
  const auto batch = infer_batch(*store, rows, mode, opts);

  Output out(o.out);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.stream() << prediction_json(store->header(), i, batch.predictions[i], batch.traces[i]).dump() << '\n';
  }
  out.close();
  if (!o.trace.empty()) {
    Output trace(o.trace);
    for (std::size_t i = 0; i < rows.size(); ++i) trace.stream() << trace_json(i, batch.traces[i]).dump() << '\n';
    trace.close();
  }
  return kOk;
}

void emit_reports(const Options& o, const std::vector<IoReport>& rows, json extra) {
  Output out(o.out);
  if (o.format == "csv") {
    write_csv(out.stream(), rows);
  } else if (o.format == "tsv") {
    write_histogram_tsv(out.stream(), rows);
  } else {
    extra["rows"] = json::array();
    for (const auto& r : rows) extra["rows"].push_back(to_json(r));
    out.stream() << extra.dump(2) << '\n';
  }
  out.close();
}

json config_echo(const Options& o, const Source& src, const WorkloadSpec& w) {
  return {{"trees", src.forest.trees.size()},
          {"observations", w.observations.size()},
          {"repetitions", w.repetitions},
          {"cold_start", w.cold_start},
          {"seed", o.seed}};
}

int cmd_compare(const Options& o) {
  const auto cfg = o.layout.config();
  validate(cfg);
  const auto src = load_source(o);
  const auto w = load_workload(o, src);
  const auto cmp = compare_layouts(src.forest, cfg, w);
  json extra = config_echo(o, src, w);
  extra["predictions_agree"] = cmp.predictions_agree;
  emit_reports(o, cmp.rows, std::move(extra));
  if (!cmp.predictions_agree) {
    std::cerr << "error: layouts disagree on predictions\n";
    return kCorruption;
  }
  return kOk;
}

int cmd_sweep_bin_depth(const Options& o) {
  auto cfg = o.layout.config();
  validate(cfg);
  const auto src = load_source(o);
  const auto w = load_workload(o, src);
  const auto sweep = sweep_bin_depth(src.forest, o.depths, w, cfg);
  json extra = config_echo(o, src, w);
  extra["min_mean_depth"] = sweep.min_mean_depth;
  extra["min_variance_depth"] = sweep.min_variance_depth;
  emit_reports(o, sweep.rows, std::move(extra));
  return kOk;
}

std::vector<std::uint32_t> bucket_sizes(const std::vector<std::string>& sizes) {
  std::vector<std::uint32_t> out;
  for (const auto& s : sizes) {
    if (s == "all") {
      out.push_back(KvStoreConfig::kWholeModel);
      continue;
    }
    std::uint32_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || v == 0) {
      throw ValidationError("bucket size '" + s + "' is not a positive integer or 'all'");
    }
    out.push_back(v);
  }
  return out;
}

int cmd_sweep_kv_bucket(const Options& o) {
  const auto sizes = bucket_sizes(o.sizes);
  const auto cfg = o.layout.config();
  validate(cfg);
  const auto src = load_source(o);
  const auto w = load_workload(o, src);
  const auto rows = sweep_kv_bucket(pack(src.forest, cfg), sizes, w);
  Output out(o.out);
  if (o.format == "csv") {
    write_csv(out.stream(), rows);
  } else {
    if (o.format == "tsv") throw ValidationError("the bucket sweep reports JSON or CSV");
    json doc = config_echo(o, src, w);
    doc["rows"] = json::array();
    for (const auto& r : rows) doc["rows"].push_back(to_json(r));
    out.stream() << doc.dump(2) << '\n';
  }
  out.close();
  return kOk;
}

int cmd_generate(const Options& o) {
  const auto s = generate_synthetic_forest(synthetic_spec(o));
  Output out(o.out);
  out.stream() << to_json(s.forest).dump() << '\n';
  out.close();
  if (!o.observations_out.empty()) {
    Output obs(o.observations_out);
    write_observations_csv(obs.stream(), s.sampler.sample(o.workload.num_obs, o.seed + 1));
    obs.close();
  }
  return kOk;
}

void add_layout(CLI::App* app, LayoutFlags& f) {
  app->add_option("--layout", f.layout, "Node layout")
      ->check(CLI::IsMember({"bfs", "dfs", "bin_dfs", "bin_wdfs", "bin_block_wdfs"}))
      ->capture_default_str();
  app->add_option("--block-bytes", f.block_bytes, "Block size in bytes (power of two)")->capture_default_str();
  app->add_option("--bin-depth", f.bin_depth, "Levels per tree stored in the interleaved bins")->capture_default_str();
  app->add_option("--trees-per-bin", f.trees_per_bin, "Trees per bin (0: as many as fit one block)")
      ->capture_default_str();
}

void add_synthetic(CLI::App* app, Options& o, bool with_switch) {
  if (with_switch) app->add_flag("--synthetic", o.synthetic.enabled, "Generate a seeded synthetic forest");
  app->add_option("--trees", o.synthetic.trees, "Synthetic tree count")->capture_default_str();
  app->add_option("--depth", o.synthetic.depth, "Synthetic tree depth")->capture_default_str();
  app->add_option("--skew", o.synthetic.skew, "Leaf cardinality skew")
      ->check(CLI::IsMember({"uniform", "geometric"}))
      ->capture_default_str();
  app->add_option("--task", o.synthetic.task, "Synthetic task")
      ->check(CLI::IsMember({"classify", "regress"}))
      ->capture_default_str();
  app->add_option("--kind", o.synthetic.kind, "Synthetic ensemble kind")
      ->check(CLI::IsMember({"rf", "gbt"}))
      ->capture_default_str();
  app->add_option("--features", o.synthetic.features, "Synthetic feature count")->capture_default_str();
  app->add_option("--classes", o.synthetic.classes, "Synthetic class count")->capture_default_str();
  app->add_option("--seed", o.seed, "Random seed")->capture_default_str();
}

void add_workload(CLI::App* app, Options& o) {
  app->add_option("--observations", o.workload.observations, "Observations file (CSV or JSON)");
  app->add_option("--num-obs", o.workload.num_obs, "Synthetic observations to draw")->capture_default_str();
  app->add_option("--repetitions", o.workload.repetitions, "Workload repetitions")->capture_default_str();
  app->add_flag("--warm", o.workload.warm, "Keep blocks resident across inferences");
}

void add_report(CLI::App* app, Options& o, std::vector<std::string> formats) {
  app->add_option("--format", o.format, "Report format")->check(CLI::IsMember(formats))->capture_default_str();
  app->add_option("--out", o.out, "Report path (default stdout)");
}

// key = value lines become leading --key value arguments, so that flags
// given on the command line take precedence.
std::vector<std::string> config_arguments(const std::string& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> args;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(path + ":" + std::to_string(line_no) + ": expected key = value");
    const auto strip = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      s = a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
      return s;
    };
    auto key = strip(line.substr(0, eq));
    const auto value = strip(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (value == "true") {
      args.push_back("--" + key);
    } else if (value != "false") {
      args.push_back("--" + key);
      args.push_back(value);
    }
  }
  return args;
}

// Splices config-file arguments in right after the subcommand path.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (path.empty()) return args;
  std::size_t at = 0;
  while (at < args.size() && args[at].rfind("-", 0) != 0) ++at;
  auto extra = config_arguments(path);
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), extra.begin(), extra.end());
  return args;
}

int run(int argc, char** argv) {
  Options o;
  CLI::App app{"Pack tree ensembles into block-aligned layouts and run external-memory inference"};
  app.name("pacset");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "key = value file supplying flags; command-line flags win");

  auto* pack_cmd = app.add_subcommand("pack", "Pack a forest into a block file");
  pack_cmd->add_option("--model", o.model, "Interchange JSON model");
  add_synthetic(pack_cmd, o, true);
  add_layout(pack_cmd, o.layout);
  pack_cmd->add_option("--out", o.out, "Packed output path")->required();

  auto* infer_cmd = app.add_subcommand("infer", "Run inference from a packed file");
  infer_cmd->add_option("--packed", o.packed, "Packed model")->required();
  infer_cmd->add_option("--observations", o.workload.observations, "Observations file (CSV or JSON)")->required();
  infer_cmd->add_option("--out", o.out, "Predictions JSONL (default stdout)");
  infer_cmd->add_option("--trace", o.trace, "Block trace JSONL");
  infer_cmd->add_option("--store", o.store, "Block store backend")
      ->check(CLI::IsMember({"file", "mmap", "kv"}))
      ->capture_default_str();
  infer_cmd->add_option("--mode", o.mode, "Batch mode")
      ->check(CLI::IsMember({"sequential", "per_bin_parallel"}))
      ->capture_default_str();
  infer_cmd->add_option("--nodes-per-value", o.nodes_per_value, "Records per key for the kv store")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  infer_cmd->add_flag("--kv-cache", o.kv_cache, "Keep fetched kv buckets for the rest of an inference");
  infer_cmd->add_option("--expect-block-bytes", o.expect_block_bytes, "Reject files with another block size");
  infer_cmd->add_flag("--warm", o.workload.warm, "Keep blocks resident across inferences");

  auto* compare_cmd = app.add_subcommand("compare", "Count unique blocks per inference for every layout");
  compare_cmd->add_option("--model", o.model, "Interchange JSON model");
  add_synthetic(compare_cmd, o, true);
  add_layout(compare_cmd, o.layout);
  add_workload(compare_cmd, o);
  add_report(compare_cmd, o, {"json", "csv", "tsv"});

  auto* sweep_cmd = app.add_subcommand("sweep", "Parameter sweeps");
  sweep_cmd->require_subcommand(1);
  auto* depth_cmd = sweep_cmd->add_subcommand("bin-depth", "Unique blocks as a function of bin depth");
  depth_cmd->add_option("--model", o.model, "Interchange JSON model");
  add_synthetic(depth_cmd, o, true);
  add_layout(depth_cmd, o.layout);
  add_workload(depth_cmd, o);
  add_report(depth_cmd, o, {"json", "csv", "tsv"});
  depth_cmd->add_option("--depths", o.depths, "Bin depths")->delimiter(',')->capture_default_str();
  auto* bucket_cmd = sweep_cmd->add_subcommand("kv-bucket", "Fetches and bytes moved as the kv bucket grows");
  bucket_cmd->add_option("--model", o.model, "Interchange JSON model");
  add_synthetic(bucket_cmd, o, true);
  add_layout(bucket_cmd, o.layout);
  add_workload(bucket_cmd, o);
  add_report(bucket_cmd, o, {"json", "csv"});
  bucket_cmd->add_option("--sizes", o.sizes, "Records per key; 'all' for the whole model")
      ->delimiter(',')
      ->capture_default_str();

  auto* gen_cmd = app.add_subcommand("generate", "Write a seeded synthetic forest as interchange JSON");
  add_synthetic(gen_cmd, o, false);
  gen_cmd->add_option("--out", o.out, "Model path (default stdout)");
  gen_cmd->add_option("--observations-out", o.observations_out, "Also write in-distribution observations (CSV)");
  gen_cmd->add_option("--num-obs", o.workload.num_obs, "Observations to draw")->capture_default_str();

  std::vector<std::string> args(argv + 1, argv + argc);
  args = expand_config(std::move(args));
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  if (pack_cmd->parsed()) return cmd_pack(o);
  if (infer_cmd->parsed()) return cmd_infer(o);
  if (compare_cmd->parsed()) return cmd_compare(o);
  if (depth_cmd->parsed()) return cmd_sweep_bin_depth(o);
  if (bucket_cmd->parsed()) return cmd_sweep_kv_bucket(o);
  if (gen_cmd->parsed()) return cmd_generate(o);
  return kValidation;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCorruption;
  } catch (const CorruptionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCorruption;
  } catch (const RangeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCorruption;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
}
