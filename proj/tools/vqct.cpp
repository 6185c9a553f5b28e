#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vqct/vqct.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vqct;

namespace {

class UsageError : public DomainError {
 public:
  using DomainError::DomainError;
};

// ---------------------------------------------------------------------------
// Config file merge and resolved-config record

std::string json_scalar_to_arg(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw UsageError("config values must be scalars or arrays of scalars");
}

// Values from the file only fill options the command line left unset.
void apply_config(CLI::App* sub, const json& cfg) {
  if (!cfg.is_object()) throw UsageError("config file must hold a JSON object");
  for (auto& [key, value] : cfg.items()) {
    if (key == "command") {
      if (value != sub->get_name()) throw UsageError("config file was written for '" + value.dump() + "'");
      continue;
    }
    CLI::Option* opt = nullptr;
    try {
      opt = sub->get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      throw UsageError("unknown config key '" + key + "' for '" + sub->get_name() + "'");
    }
    if (opt->count() > 0 || key == "config") continue;
    if (value.is_array()) {
      for (const auto& v : value) opt->add_result(json_scalar_to_arg(v));
    } else {
      opt->add_result(json_scalar_to_arg(value));
    }
    opt->run_callback();
  }
}

json arg_to_json(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  try {
    std::size_t used = 0;
    const long long i = std::stoll(s, &used);
    if (used == s.size()) return i;
    const double d = std::stod(s, &used);
    if (used == s.size()) return d;
  } catch (const std::exception&) {
  }
  return s;
}

json resolved_config(CLI::App* sub) {
  json out = json::object();
  out["command"] = sub->get_name();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name.empty()) continue;
    const bool multi = opt->get_expected_max() > 1;
    std::vector<std::string> vals = opt->results();
    if (vals.empty()) {
      std::string d = opt->get_default_str();
      if (multi && d.size() >= 2 && (d.front() == '[' || d.front() == '{')) {
        d = d.substr(1, d.size() - 2);
        std::stringstream ss(d);
        for (std::string item; std::getline(ss, item, ',');) vals.push_back(item);
      } else if (!d.empty()) {
        vals = {d};
      } else {
        continue;
      }
    }
    if (multi) {
      json arr = json::array();
      for (const auto& v : vals) arr.push_back(arg_to_json(v));
      out[name] = arr;
    } else {
      out[name] = arg_to_json(vals.back());
    }
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) { io::write_file(path, text); }

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// Case directories: case_{i}_ct.mvol / case_{i}_pet.mvol

std::string case_path(const std::string& dir, const std::string& id, const char* kind) {
  return (fs::path(dir) / (id + "_" + kind + ".mvol")).string();
}

std::vector<std::string> list_cases(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: '" + dir + "'");
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    const std::string suffix = "_ct.mvol";
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      const std::string id = name.substr(0, name.size() - suffix.size());
      if (fs::exists(case_path(dir, id, "pet"))) ids.push_back(id);
    }
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw DomainError("no PET/CT case pairs in '" + dir + "'");
  return ids;
}

// trial < 0 selects every case.
std::vector<std::string> training_cases(const std::string& dir, int trial, std::uint64_t folds_seed) {
  const auto ids = list_cases(dir);
  if (trial < 0) return ids;
  auto train = make_folds(ids, folds_seed).trial(trial).train;
  std::sort(train.begin(), train.end());
  return train;
}

std::string loss_log_csv(const TrainLog& log) {
  std::string out = "step,l1,commitment\n";
  for (std::size_t i = 0; i < log.l1.size(); ++i)
    out += std::to_string(i) + "," + format_value(log.l1[i]) + "," + format_value(log.commitment[i]) + "\n";
  return out;
}

void write_training_outputs(const Checkpoint& ck, const TrainLog& log, const std::string& out, CLI::App* sub) {
  save_checkpoint(ck, out);
  write_text(out + ".log.csv", loss_log_csv(log));
  write_json(out + ".config.json", resolved_config(sub));
}

std::string case_id_from_path(const std::string& path) {
  std::string stem = fs::path(path).stem().string();
  for (const std::string suffix : {"_ct", "_sct", "_pet"})
    if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
      return stem.substr(0, stem.size() - suffix.size());
  return stem;
}

// ---------------------------------------------------------------------------
// Subcommands

struct PhantomArgs {
  int count = 5;
  std::vector<std::size_t> dims{96};
  std::uint64_t seed = 0;
  double spacing = 1.5;
  std::string out;
};

void run_phantom(const PhantomArgs& a, CLI::App* sub) {
  if (a.count < 1) throw UsageError("--count must be >= 1");
  if (a.dims.size() != 1 && a.dims.size() != 3) throw UsageError("--dims takes one or three extents");
  const Dims dims = a.dims.size() == 1 ? Dims{a.dims[0], a.dims[0], a.dims[0]} : Dims{a.dims[0], a.dims[1], a.dims[2]};
  for (auto d : dims)
    if (d < kPhantomMinExtent) throw UsageError("--dims must be >= " + std::to_string(kPhantomMinExtent) + " per axis");
  if (!(a.spacing > 0.0)) throw UsageError("--spacing must be positive");
  ensure_dir(a.out);
  PhantomOptions opt;
  opt.spacing_mm = {a.spacing, a.spacing, a.spacing};
  for (int i = 0; i < a.count; ++i) {
    const auto pair = generate_phantom_pair(dims, mix_seed(a.seed, static_cast<std::uint64_t>(i)), opt);
    const std::string id = "case_" + std::to_string(i);
    write_volume(pair.ct, case_path(a.out, id, "ct"));
    write_volume(pair.pet, case_path(a.out, id, "pet"));
    write_json((fs::path(a.out) / (id + "_truth.json")).string(), truth_to_json(pair.truth));
  }
  write_json((fs::path(a.out) / "run_config.json").string(), resolved_config(sub));
}

struct TrainArgs {
  // model
  int rank = 2, depth = 2, base_channels = 8, codebook_size = 32, codebook_dim = 8, levels = 1;
  std::uint64_t model_seed = 0;
  // data
  std::string cases;
  int trial = 0;
  std::uint64_t folds_seed = 0;
  std::vector<std::string> ct;
  int textures = 0;
  std::size_t texture_dims = 48;
  std::uint64_t texture_seed = 0;
  // optimization
  int steps = 300, batch_size = 8, expire_age = 2, kmeans_iters = 10;
  double lr = 1e-5, beta = 0.25, weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::size_t cube_edge = 16;
  bool no_commitment = false;
  // fine-tuning
  std::string base, mode = "nofrozen";
  bool train_codebook = false;
  std::string out;
};

TrainConfig train_config(const TrainArgs& a) {
  TrainConfig c;
  c.mode = finetune_mode_from_string(a.mode);
  c.steps = a.steps;
  c.batch_size = a.batch_size;
  c.learning_rate = a.lr;
  c.seed = a.seed;
  c.commitment_beta = a.beta;
  c.expire_age = a.expire_age;
  c.folds_seed = a.folds_seed;
  c.use_commitment = !a.no_commitment;
  c.enc_frozen_codebook_trainable = a.train_codebook;
  c.weight_decay = a.weight_decay;
  c.kmeans_iters = a.kmeans_iters;
  c.cube_edge = a.cube_edge;
  return c;
}

void run_pretrain(const TrainArgs& a, CLI::App* sub) {
  ModelConfig mc;
  mc.spatial_rank = a.rank;
  mc.depth = a.depth;
  mc.base_channels = a.base_channels;
  mc.codebook_size = a.codebook_size;
  mc.codebook_dim = a.codebook_dim;
  mc.pyramid_levels = a.levels;
  mc.seed = a.model_seed;
  mc.commitment_beta = a.beta;
  mc.validate();

  std::vector<Volume> vols;
  if (!a.cases.empty())
    for (const auto& id : training_cases(a.cases, a.trial, a.folds_seed))
      vols.push_back(normalize(read_volume(case_path(a.cases, id, "ct")), IntensitySpace::Unit01));
  for (const auto& path : a.ct) vols.push_back(normalize(read_volume(path), IntensitySpace::Unit01));
  for (int i = 0; i < a.textures; ++i) {
    const std::size_t e = a.texture_dims;
    vols.push_back(normalize(generate_texture_volume({e, e, e}, mix_seed(a.texture_seed, static_cast<std::uint64_t>(i))),
                             IntensitySpace::Unit01));
  }
  if (vols.empty()) throw UsageError("pretrain needs --cases, --ct or --textures");
  TrainLog log;
  const auto ck = pretrain_recon(mc, vols, train_config(a), &log);
  write_training_outputs(ck, log, a.out, sub);
}

void run_finetune(const TrainArgs& a, CLI::App* sub) {
  if (a.cases.empty()) throw UsageError("finetune needs --cases");
  const Checkpoint base = load_checkpoint(a.base);
  if (base.config.spatial_rank != 2) throw DomainError("fine-tuning needs a 2D base checkpoint");
  std::vector<Sample> pairs;
  for (const auto& id : training_cases(a.cases, a.trial, a.folds_seed)) {
    auto p = translation_pairs(read_volume(case_path(a.cases, id, "pet")), read_volume(case_path(a.cases, id, "ct")),
                               base.config.granularity());
    pairs.insert(pairs.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  TrainLog log;
  const auto ck = finetune_translate(base, pairs, train_config(a), &log);
  write_training_outputs(ck, log, a.out, sub);
}

struct InferArgs {
  std::string ckpt, input, out;
  int threads = 1;
  std::size_t cube_edge = kDefaultCubeEdge;
  bool dump_planes = false;
};

std::string with_suffix(const std::string& path, const std::string& suffix) {
  const fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix + p.extension().string())).string();
}

void run_reconstruct(const InferArgs& a, CLI::App* sub) {
  const auto ck = load_checkpoint(a.ckpt);
  const Volume ct = read_volume(a.input);
  if (ct.space != IntensitySpace::HU) throw DomainError("reconstruct expects an HU CT volume");
  write_volume(reconstruct_ct(ck, ct, a.threads, a.cube_edge), a.out);
  write_json(a.out + ".config.json", resolved_config(sub));
}

void run_translate(const InferArgs& a, CLI::App* sub) {
  const auto ck = load_checkpoint(a.ckpt);
  const auto r = translate_pet(ck, read_volume(a.input), a.threads);
  write_volume(r.fused, a.out);
  if (a.dump_planes)
    for (auto p : kPlanes) write_volume(r.plane(p), with_suffix(a.out, "_" + to_string(p)));
  write_json(a.out + ".config.json", resolved_config(sub));
}

struct EvaluateArgs {
  std::vector<std::string> pred, gt, case_id;
  std::string out, diff_dir, diff_slices = "mid";
  double diff_cap = 200.0, bone_hu = kDefaultBoneHu;
};

void run_evaluate(const EvaluateArgs& a, CLI::App* sub) {
  if (a.pred.size() != a.gt.size()) throw UsageError("--pred and --gt need the same number of files");
  if (!a.case_id.empty() && a.case_id.size() != a.gt.size()) throw UsageError("--case-id count must match --gt");
  if (a.diff_slices != "mid" && a.diff_slices != "all") throw UsageError("--diff-slices is 'mid' or 'all'");
  if (!a.diff_dir.empty()) ensure_dir(a.diff_dir);
  EvaluateOptions opt;
  opt.bone_threshold_hu = a.bone_hu;
  std::vector<MetricRow> rows;
  for (std::size_t i = 0; i < a.gt.size(); ++i) {
    const std::string id = a.case_id.empty() ? case_id_from_path(a.gt[i]) : a.case_id[i];
    const Volume pred = read_volume(a.pred[i]), gt = read_volume(a.gt[i]);
    auto r = evaluate_case(id, pred, gt, opt);
    rows.insert(rows.end(), r.begin(), r.end());
    if (a.diff_dir.empty()) continue;
    const auto map = difference_map(pred, gt, body_contour(gt).mask, a.diff_cap);
    const std::size_t nz = gt.dims[2];
    for (std::size_t z = 0; z < nz; ++z) {
      if (a.diff_slices == "mid" && z != nz / 2) continue;
      write_text((fs::path(a.diff_dir) / (id + "_diff_z" + std::to_string(z) + ".ppm")).string(),
                 encode_ppm(map.axial_rgb[z], gt.dims[0], gt.dims[1]));
    }
  }
  write_text(a.out, rows_to_csv(rows));
  write_json(a.out + ".config.json", resolved_config(sub));
}

struct StatsArgs {
  std::string a, b, metric = "MAE", region = "whole", out, label;
};

void run_stats(const StatsArgs& s, CLI::App* sub) {
  const auto ra = csv_to_rows(io::read_file(s.a)), rb = csv_to_rows(io::read_file(s.b));
  const std::string label = s.label.empty() ? case_id_from_path(s.a) + " vs " + case_id_from_path(s.b) : s.label;
  const auto rep = compare_reports(ra, rb, s.metric, region_from_string(s.region), label);
  json j = to_json(rep);
  j["metric"] = s.metric;
  j["region"] = s.region;
  write_json(s.out, j);
  write_json(s.out + ".config.json", resolved_config(sub));
}

struct SelectArgs {
  std::vector<std::string> ckpt, ct;
  std::string out, copy_to;
  int threads = 1;
};

void run_select(const SelectArgs& a, CLI::App* sub) {
  std::vector<Checkpoint> cands;
  for (const auto& p : a.ckpt) cands.push_back(load_checkpoint(p));
  std::vector<Volume> cts;
  for (const auto& p : a.ct) cts.push_back(read_volume(p));
  std::vector<double> scores;
  const std::size_t best = select_checkpoint(cands, cts, &scores, a.threads);
  json j = {{"selected", a.ckpt[best]}, {"index", best}, {"candidates", a.ckpt}};
  if (!scores.empty()) j["mse_hu"] = scores;
  write_json(a.out, j);
  if (!a.copy_to.empty()) save_checkpoint(cands[best], a.copy_to);
  write_json(a.out + ".config.json", resolved_config(sub));
}

void require(CLI::App* sub, std::initializer_list<const char*> names) {
  for (const char* n : names)
    if (sub->get_option(std::string("--") + n)->count() == 0)
      throw UsageError(sub->get_name() + ": --" + n + " is required");
}

void add_training_options(CLI::App* s, TrainArgs& t) {
  s->add_option("--steps", t.steps, "Optimizer steps");
  s->add_option("--batch-size", t.batch_size, "Samples per step");
  s->add_option("--lr", t.lr, "AdamW learning rate");
  s->add_option("--weight-decay", t.weight_decay, "AdamW decoupled weight decay");
  s->add_option("--seed", t.seed, "Run seed (batch order, codebook init, expiration)");
  s->add_option("--beta", t.beta, "Commitment weight");
  s->add_option("--expire-age", t.expire_age, "Batches without use before a code is replaced");
  s->add_option("--kmeans-iters", t.kmeans_iters, "Lloyd iterations for codebook init");
  s->add_flag("--no-commitment", t.no_commitment, "Drop the commitment term from the loss");
  s->add_option("--cases", t.cases, "Directory of case_{i}_ct.mvol / case_{i}_pet.mvol pairs");
  s->add_option("--trial", t.trial, "Fold trial whose training folds are used (-1: all cases)");
  s->add_option("--folds-seed", t.folds_seed, "Seed of the five-fold split");
  s->add_option("--out", t.out, "Output checkpoint (.vqck)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vqct: VQ autoencoder toolkit for PET-to-CT translation"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  std::string config_path;

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", config_path, "JSON file of option values; command-line flags take precedence");
  };

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "Generate synthetic PET/CT phantom pairs");
  phantom->add_option("--count", ph.count, "Number of cases");
  phantom->add_option("--dims", ph.dims, "Volume extents (one value or three)")->expected(1, 3);
  phantom->add_option("--seed", ph.seed, "Base seed; case i uses a derived stream");
  phantom->add_option("--spacing", ph.spacing, "Isotropic voxel spacing in mm");
  phantom->add_option("--out", ph.out, "Output directory");
  add_config(phantom);

  TrainArgs pt;
  auto* pretrain = app.add_subcommand("pretrain", "Self-supervised CT reconstruction pre-training");
  pretrain->add_option("--rank", pt.rank, "Spatial rank of the model (2 or 3)");
  pretrain->add_option("--depth", pt.depth, "Encoder downsampling stages");
  pretrain->add_option("--base-channels", pt.base_channels, "Channels of the first stage");
  pretrain->add_option("--codebook-size", pt.codebook_size, "Codes per pyramid level");
  pretrain->add_option("--codebook-dim", pt.codebook_dim, "Code dimension");
  pretrain->add_option("--levels", pt.levels, "Pyramid levels");
  pretrain->add_option("--model-seed", pt.model_seed, "Parameter initialization seed");
  pretrain->add_option("--ct", pt.ct, "Additional HU CT volumes")->expected(0, -1);
  pretrain->add_option("--textures", pt.textures, "Number of procedural texture volumes");
  pretrain->add_option("--texture-dims", pt.texture_dims, "Edge of each texture volume");
  pretrain->add_option("--texture-seed", pt.texture_seed, "Texture generator seed");
  pretrain->add_option("--cube-edge", pt.cube_edge, "Cube edge for 3D models");
  add_training_options(pretrain, pt);
  add_config(pretrain);

  TrainArgs ft;
  auto* finetune = app.add_subcommand("finetune", "PET-to-CT fine-tuning from a base checkpoint");
  finetune->add_option("--base", ft.base, "Base checkpoint");
  finetune->add_option("--mode", ft.mode, "scratch | nofrozen | encfrozen");
  finetune->add_flag("--train-codebook", ft.train_codebook, "Keep the codebook trainable in encfrozen mode");
  add_training_options(finetune, ft);
  add_config(finetune);

  InferArgs rc;
  auto* reconstruct = app.add_subcommand("reconstruct", "Reconstruct a CT through a checkpoint");
  reconstruct->add_option("--ckpt", rc.ckpt, "Checkpoint");
  reconstruct->add_option("--ct", rc.input, "HU CT volume");
  reconstruct->add_option("--out", rc.out, "Output volume");
  reconstruct->add_option("--threads", rc.threads, "Worker threads");
  reconstruct->add_option("--cube-edge", rc.cube_edge, "Cube edge for 3D models");
  add_config(reconstruct);

  InferArgs tr;
  auto* translate = app.add_subcommand("translate", "Translate a PET volume to a synthetic CT");
  translate->add_option("--ckpt", tr.ckpt, "Fine-tuned checkpoint");
  translate->add_option("--pet", tr.input, "PET activity volume");
  translate->add_option("--out", tr.out, "Output sCT volume");
  translate->add_option("--threads", tr.threads, "Worker threads");
  translate->add_flag("--dump-planes", tr.dump_planes, "Also write the axial/coronal/sagittal volumes");
  add_config(translate);

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Masked metrics of predicted against reference CTs");
  evaluate->add_option("--pred", ev.pred, "Predicted HU volumes")->expected(1, -1);
  evaluate->add_option("--gt", ev.gt, "Reference HU volumes")->expected(1, -1);
  evaluate->add_option("--case-id", ev.case_id, "Case ids (default: derived from --gt names)")->expected(0, -1);
  evaluate->add_option("--out", ev.out, "Report CSV");
  evaluate->add_option("--diff-dir", ev.diff_dir, "Directory for difference-map PPMs");
  evaluate->add_option("--diff-slices", ev.diff_slices, "mid | all");
  evaluate->add_option("--diff-cap", ev.diff_cap, "Colour saturation in HU");
  evaluate->add_option("--bone-hu", ev.bone_hu, "Bone threshold in HU");
  add_config(evaluate);

  StatsArgs st;
  auto* stats = app.add_subcommand("stats", "Wilcoxon signed-rank test between two reports");
  stats->add_option("--a", st.a, "First report CSV");
  stats->add_option("--b", st.b, "Second report CSV");
  stats->add_option("--metric", st.metric, "MAE | PSNR | SSIM | DSC");
  stats->add_option("--region", st.region, "whole | soft | bone");
  stats->add_option("--label", st.label, "Comparison label");
  stats->add_option("--out", st.out, "Output JSON");
  add_config(stats);

  SelectArgs se;
  auto* select = app.add_subcommand("select", "Pick the checkpoint with the lowest CT reconstruction MSE");
  select->add_option("--ckpt", se.ckpt, "Candidate checkpoints")->expected(1, -1);
  select->add_option("--ct", se.ct, "Evaluation HU CT volumes")->expected(0, -1);
  select->add_option("--out", se.out, "Output JSON");
  select->add_option("--copy-to", se.copy_to, "Also write the selected checkpoint here");
  select->add_option("--threads", se.threads, "Worker threads");
  add_config(select);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!config_path.empty()) {
      json cfg;
      try {
        cfg = json::parse(io::read_file(config_path));
      } catch (const json::exception& e) {
        throw UsageError("config file '" + config_path + "': " + e.what());
      }
      apply_config(sub, cfg);
    }
    if (sub == phantom) {
      require(sub, {"out"});
      run_phantom(ph, sub);
    } else if (sub == pretrain) {
      require(sub, {"out"});
      run_pretrain(pt, sub);
    } else if (sub == finetune) {
      require(sub, {"base", "cases", "out"});
      run_finetune(ft, sub);
    } else if (sub == reconstruct) {
      require(sub, {"ckpt", "ct", "out"});
      run_reconstruct(rc, sub);
    } else if (sub == translate) {
      require(sub, {"ckpt", "pet", "out"});
      run_translate(tr, sub);
    } else if (sub == evaluate) {
      require(sub, {"pred", "gt", "out"});
      run_evaluate(ev, sub);
    } else if (sub == stats) {
      require(sub, {"a", "b", "out"});
      run_stats(st, sub);
    } else if (sub == select) {
      require(sub, {"ckpt", "out"});
      run_select(se, sub);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << sub->help();
    return 1;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
