#include "rsoup/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "rsoup/checkpoint.hpp"
#include "rsoup/eval_report.hpp"
#include "rsoup/parallel.hpp"
#include "rsoup/shifts.hpp"
#include "rsoup/soup_search.hpp"
#include "rsoup/training.hpp"

#ifndef RSOUP_BUILD_ID
#define RSOUP_BUILD_ID "unknown"
#endif

namespace rsoup {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kEvalStream = 0xe7a1;
constexpr std::uint64_t kShiftStream = 0x541f7;
constexpr std::uint64_t kAdaptStream = 0xada97;
constexpr std::uint64_t kFewShotStream = 0xf3e5;

std::string type_name(const json& j) {
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  return j.type_name();
}

bool compatible(const json& schema, const json& value) {
  if (schema.is_null()) return true;
  if (schema.is_number_integer()) return value.is_number_integer();
  if (schema.is_number()) return value.is_number();
  return schema.type() == value.type();
}

void check_against(const json& schema, const json& value, const std::string& path) {
  if (!compatible(schema, value)) {
    throw ConfigError("config key '" + path + "': expected " + type_name(schema) + ", got " +
                      type_name(value));
  }
  if (schema.is_object()) {
    for (const auto& [k, v] : value.items()) {
      const std::string sub = path.empty() ? k : path + "." + k;
      if (!schema.contains(k)) throw ConfigError("unknown config key '" + sub + "'");
      check_against(schema.at(k), v, sub);
    }
  } else if (schema.is_array() && !schema.empty()) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      check_against(schema[0], value[i], path + "[" + std::to_string(i) + "]");
    }
  }
}

void merge_into(json& base, const json& user) {
  for (const auto& [k, v] : user.items()) {
    if (v.is_object() && base[k].is_object()) {
      merge_into(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

std::string file_digest(const fs::path& p) {
  const auto bytes = read_bytes(p);
  Fnv1a h;
  h.update(bytes.data(), bytes.size());
  return hex64(h.digest());
}

// Collects output files and their digests as they are written.
class Outputs {
 public:
  Outputs(fs::path dir, std::ostream& log) : dir_(std::move(dir)), log_(log) {}

  void text(const std::string& name, const std::string& content) {
    write_text_once(dir_ / name, content);
    record(name);
  }
  void checkpoint(const std::string& name, const Checkpoint& ck) {
    save_checkpoint(ck, dir_ / name);
    record(name);
  }
  void record(const std::string& name) {
    files_.push_back({{"file", name}, {"digest", file_digest(dir_ / name)}});
    log_ << "wrote " << (dir_ / name).string() << "\n";
  }
  void record_tree(const std::string& sub) {
    std::vector<std::string> names;
    for (const auto& e : fs::recursive_directory_iterator(dir_ / sub)) {
      if (e.is_regular_file()) names.push_back(fs::relative(e.path(), dir_).generic_string());
    }
    std::sort(names.begin(), names.end());
    for (const auto& n : names) record(n);
  }
  const fs::path& dir() const { return dir_; }
  json list() const { return files_; }

 private:
  fs::path dir_;
  std::ostream& log_;
  json files_ = json::array();
};

struct Context {
  const json& cfg;
  std::uint64_t seed;
  std::ostream& log;
};

ThreatSpec threat_from(const json& cfg, const std::string& name) {
  const Norm n = parse_norm(name);
  if (n == Norm::nominal) return ThreatSpec::nominal();
  const auto& b = cfg.at("budgets");
  const std::string key = norm_name(n);
  if (!b.contains(key)) throw ConfigError("config key 'budgets." + key + "' missing");
  const double eps = b.at(key).get<double>();
  if (!(eps >= 0.0)) throw ConfigError("config key 'budgets." + key + "': must be >= 0");
  return {n, eps};
}

std::vector<ThreatSpec> threats_from(const json& cfg, const json& names) {
  std::vector<ThreatSpec> out;
  for (const auto& n : names) out.push_back(threat_from(cfg, n.get<std::string>()));
  return out;
}

TrainConfig train_config(const json& cfg, std::uint64_t seed) {
  const auto& t = cfg.at("train");
  TrainConfig c;
  c.epochs = t.at("epochs");
  c.batch_size = t.at("batch_size");
  c.peak_lr = t.at("peak_lr");
  c.ramp_fraction = t.at("ramp_fraction");
  c.momentum = t.at("momentum");
  c.weight_decay = t.at("weight_decay");
  c.seed = seed;
  c.threats = threats_from(cfg, t.at("threats"));
  c.mode = parse_mode(t.at("mode"));
  c.attack.steps = t.at("attack_steps");
  c.attack.loss = parse_attack_loss(t.at("attack_loss"));
  c.l1_attack_steps = t.at("l1_attack_steps");
  c.validation_fraction = t.at("validation_fraction");
  c.validation_max_points = t.at("validation_max_points");
  c.finetune_lr_factor = t.at("finetune_lr_factor");
  return c;
}

AttackConfig eval_attack(const json& cfg, std::uint64_t seed) {
  const auto& e = cfg.at("eval");
  AttackConfig a;
  a.steps = e.at("attack_steps");
  a.restarts = e.at("restarts");
  a.loss = parse_attack_loss(e.at("attack_loss"));
  a.rng_seed = mix_seed(seed, kEvalStream);
  a.validate();
  return a;
}

std::pair<Dataset, Dataset> load_data(const json& cfg) {
  const auto& d = cfg.at("dataset");
  const std::string source = d.at("source");
  if (source == "shapes") {
    const std::uint64_t s = d.at("seed");
    const std::size_t side = d.at("side");
    return {generate_shapes(d.at("n_train"), mix_seed(s, 1), side, "shapes-train"),
            generate_shapes(d.at("n_test"), mix_seed(s, 2), side, "shapes-test")};
  }
  if (source == "raw") {
    const std::string tr = d.at("train_path"), te = d.at("test_path");
    if (tr.empty() || te.empty()) {
      throw ConfigError("config keys 'dataset.train_path' and 'dataset.test_path' are required "
                        "for source 'raw'");
    }
    return {load_raw_dataset(tr), load_raw_dataset(te)};
  }
  throw ConfigError("config key 'dataset.source': unknown source '" + source +
                    "' (shapes, raw)");
}

ArchSpec config_arch(const json& cfg) {
  try {
    return ArchSpec::parse(cfg.at("arch"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config key 'arch': ") + e.what());
  }
}

ArchSpec arch_for(const json& cfg, const Dataset& data) {
  const ArchSpec a = config_arch(cfg);
  if (a.channels != data.channels() || a.height != data.height() || a.cols != data.width() ||
      a.classes != data.classes) {
    throw DataError("architecture " + a.id() + " does not fit dataset '" + data.id + "' (" +
                    shape_to_string(data.images.shape()) + ", " +
                    std::to_string(data.classes) + " classes)");
  }
  return a;
}

Dataset eval_subset(const Dataset& test, const json& cfg) {
  const std::size_t n = std::min(cfg.at("eval").at("n_points").get<std::size_t>(), test.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return test.subset(idx, test.id + "/eval" + std::to_string(n));
}

// Every input must match the configured architecture.
std::vector<Checkpoint> load_inputs(const CommandRequest& req, std::size_t min_count,
                                    std::size_t max_count = 0) {
  if (req.checkpoints.size() < min_count ||
      (max_count && req.checkpoints.size() > max_count)) {
    std::string want = std::to_string(min_count);
    if (max_count != min_count) want += max_count ? "-" + std::to_string(max_count) : " or more";
    throw std::invalid_argument(req.command + ": expected " + want + " checkpoint(s), got " +
                                std::to_string(req.checkpoints.size()));
  }
  std::vector<Checkpoint> out;
  const ArchSpec arch = config_arch(req.config);
  for (const auto& p : req.checkpoints) out.push_back(load_checkpoint(p, arch));
  return out;
}

std::vector<std::string> input_ids(const CommandRequest& req) {
  std::vector<std::string> ids;
  for (const auto& p : req.checkpoints) {
    std::string id = p.parent_path().filename().string();
    if (id.empty() || id == ".") id = p.stem().string();
    ids.push_back(id);
  }
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (ids[j] == ids[i]) ids[i] += "#" + std::to_string(i);
  return ids;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// ---- commands -------------------------------------------------------------

json cmd_train(const CommandRequest& req, Context& ctx, Outputs& out, bool fine) {
  auto [train_set, test] = load_data(ctx.cfg);
  TrainConfig tc = train_config(ctx.cfg, ctx.seed);
  std::string log_lines;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    log_lines += e.to_json().dump() + "\n";
    ctx.log << "epoch " << e.epoch << " loss " << e.train_loss << " val_clean "
            << e.val_clean_acc << " val_robust " << e.val_robust_acc << "\n";
  };
  Checkpoint ck;
  if (!fine) {
    const ArchSpec arch = arch_for(ctx.cfg, train_set);
    ck = train(ModelInit::fresh(arch, mix_seed(ctx.seed, kInitStream)), train_set, tc, hooks);
  } else {
    arch_for(ctx.cfg, train_set);
    const auto base = load_inputs(req, 1, 1)[0];
    const auto& f = ctx.cfg.at("finetune");
    tc.epochs = f.at("epochs");
    const MultiThreatMode mode = parse_mode(f.at("mode"));
    if (mode == MultiThreatMode::single) {
      ck = finetune(base, threat_from(ctx.cfg, f.at("target")), train_set, tc, hooks);
    } else {
      const auto threats = threats_from(ctx.cfg, f.at("threats"));
      if (threats.empty()) throw ConfigError("config key 'finetune.threats': empty for mode " +
                                             mode_name(mode));
      tc.peak_lr *= tc.finetune_lr_factor;
      const auto init = ModelInit::from(base);
      ck = mode == MultiThreatMode::max ? train_max(init, train_set, threats, tc, hooks)
                                        : train_sat(init, train_set, threats, tc, hooks);
    }
  }
  out.text("train_log.jsonl", log_lines);
  out.checkpoint("checkpoint.ckpt", ck);
  return {{"lineage", describe_lineage(ck.lineage)},
          {"val_clean_acc", ck.val_clean_acc},
          {"val_robust_acc", ck.val_robust_acc},
          {"checksum", hex64(checkpoint_checksum(ck))}};
}

json cmd_attack_eval(const CommandRequest& req, Context& ctx, Outputs& out) {
  const auto models = load_inputs(req, 1);
  const auto ids = input_ids(req);
  auto data = load_data(ctx.cfg);
  const Dataset test = eval_subset(data.second, ctx.cfg);
  const auto threats = threats_from(ctx.cfg, ctx.cfg.at("eval").at("threats"));
  const AttackConfig atk = eval_attack(ctx.cfg, ctx.seed);
  const bool keep = ctx.cfg.at("eval").at("keep_flags");
  std::vector<std::string> names;
  for (const auto& t : threats) names.push_back(t.name());
  json reports = json::array();
  std::string csv = EvalReport::csv_header(names) + "\n";
  arch_for(ctx.cfg, test);
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto rep = evaluate_model(models[i].network(), ids[i], test, threats, atk, keep);
    ctx.log << ids[i] << ": clean " << rep.clean_acc << " union " << rep.union_robust_acc << "\n";
    reports.push_back(rep.to_json());
    csv += rep.csv_row(names) + "\n";
  }
  out.text("report.json", json{{"schema_version", kReportSchemaVersion}, {"reports", reports}}
                              .dump(2) + "\n");
  out.text("report.csv", csv);
  return {{"models", models.size()}, {"eval_points", test.size()}};
}

json cmd_soup(const CommandRequest& req, Context& ctx, Outputs& out) {
  const auto models = load_inputs(req, 1);
  const auto& s = ctx.cfg.at("soup");
  const auto w = s.at("weights").get<std::vector<double>>();
  const SoupMode mode = s.at("mode") == "convex" ? SoupMode::convex : SoupMode::affine;
  if (s.at("mode") != "convex" && s.at("mode") != "affine") {
    throw ConfigError("config key 'soup.mode': expected convex or affine");
  }
  if (w.size() != models.size()) {
    throw ConfigError("config key 'soup.weights': " + std::to_string(w.size()) +
                      " weights for " + std::to_string(models.size()) + " checkpoints");
  }
  const SoupWeights weights(w, mode);
  std::vector<ParamVector> params;
  for (const auto& m : models) {
    if (!(m.arch == models[0].arch)) {
      throw SchemaError("soup: architecture " + m.arch.id() + " vs " + models[0].arch.id());
    }
    params.push_back(m.params);
  }
  Checkpoint ck;
  ck.arch = models[0].arch;
  ck.params = affine_combine(params, weights);
  LineageRecord rec{"soup", {}, 0.0, w};
  for (const auto& m : models)
    for (const auto& r : m.lineage)
      for (const auto& t : r.threats)
        if (std::find(rec.threats.begin(), rec.threats.end(), t) == rec.threats.end())
          rec.threats.push_back(t);
  ck.lineage = {rec};
  ck.seed = ctx.seed;
  out.checkpoint("checkpoint.ckpt", ck);
  return {{"weights", w}, {"checksum", hex64(checkpoint_checksum(ck))}};
}

WeightGrid grid_from(const json& cfg, std::size_t n) {
  const auto& s = cfg.at("search");
  const std::string mode = s.at("mode");
  if (mode != "convex" && mode != "affine") {
    throw ConfigError("config key 'search.mode': expected convex or affine");
  }
  try {
    return WeightGrid::uniform(s.at("lo"), s.at("hi"), s.at("step"), n,
                               mode == "convex" ? SoupMode::convex : SoupMode::affine);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config section 'search': ") + e.what());
  }
}

Metric metric_from(const json& cfg, std::uint64_t seed) {
  const std::string m = cfg.at("search").at("metric");
  if (m == "clean") return Metric::clean();
  return Metric::robust(threat_from(cfg, m), eval_attack(cfg, seed));
}

std::vector<CorruptionKind> kinds_from(const json& cfg) {
  std::vector<CorruptionKind> out;
  for (const auto& k : cfg.at("shifts").at("kinds")) out.push_back(parse_corruption(k));
  return out;
}

json candidate_json(const SoupCandidate& c, const std::string& dataset) {
  return {{"weights", c.weights.values()}, {"accuracy", c.accuracy.at(dataset)}};
}

json cmd_soup_search(const CommandRequest& req, Context& ctx, Outputs& out) {
  auto models = load_inputs(req, 1);
  const auto ids = input_ids(req);
  const auto& s = ctx.cfg.at("search");
  const WeightGrid grid = grid_from(ctx.cfg, models.size());
  const auto weights = enumerate_weights(grid);
  const Metric metric = metric_from(ctx.cfg, ctx.seed);
  auto data = load_data(ctx.cfg);
  const Dataset adapt =
      adaptation_subset(data.second, s.at("adaptation_size"), mix_seed(ctx.seed, kAdaptStream));
  std::vector<Dataset> datasets;
  const std::string which = s.at("datasets");
  if (which == "clean") {
    datasets.push_back(adapt);
  } else if (which == "shifts") {
    const auto sev = ctx.cfg.at("shifts").at("severities").get<std::vector<int>>();
    for (auto& sh : build_shift_suite(adapt, kinds_from(ctx.cfg), sev,
                                      mix_seed(ctx.seed, kShiftStream))) {
      datasets.push_back(std::move(sh.data));
    }
  } else {
    throw ConfigError("config key 'search.datasets': expected clean or shifts");
  }
  CandidateEvaluator ev(std::move(models), ids);
  ctx.log << "evaluating " << weights.size() << " candidates on " << datasets.size()
          << " dataset(s)\n";
  const auto cands = ev.evaluate(weights, datasets, metric);
  std::vector<std::string> dids;
  for (const auto& d : datasets) dids.push_back(d.id);
  out.text("candidates.csv", candidates_csv(cands, ids, dids));

  const std::size_t k = s.at("top_k");
  json sel;
  sel["schema_version"] = kReportSchemaVersion;
  sel["metric"] = metric.id();
  sel["adaptation_size"] = adapt.size();
  sel["per_dataset"] = json::array();
  for (const auto& id : dids) {
    const auto top = select_best_per_dataset(cands, id, k);
    json entry{{"dataset", id}, {"top", json::array()}, {"composition", composition_json(top, ids)}};
    for (const auto& c : top) entry["top"].push_back(candidate_json(c, id));
    sel["per_dataset"].push_back(entry);
  }
  if (!cands.empty()) {
    const auto best = select_best_average(cands, dids);
    sel["best_average"] = {{"weights", best.weights.values()}, {"accuracy", best.accuracy}};
  }
  out.text("selection.json", sel.dump(2) + "\n");
  return {{"candidates_evaluated", cands.size()},
          {"datasets", dids},
          {"evaluations", ev.evaluations()},
          {"adaptation_size", adapt.size()}};
}

json cmd_shift_suite(const CommandRequest&, Context& ctx, Outputs& out) {
  auto data = load_data(ctx.cfg);
  const Dataset& test = data.second;
  const auto sev = ctx.cfg.at("shifts").at("severities").get<std::vector<int>>();
  const auto suite =
      build_shift_suite(test, kinds_from(ctx.cfg), sev, mix_seed(ctx.seed, kShiftStream));
  save_shift_suite(suite, out.dir() / "suite");
  out.record_tree("suite");
  json dist = json::array();
  for (const auto& s : suite) {
    dist.push_back({{"kind", corruption_name(s.spec.kind)},
                    {"severity", s.spec.severity},
                    {"mean_pixel_distance", mean_pixel_distance(s.data, test)}});
  }
  out.text("distances.json",
           json{{"schema_version", kReportSchemaVersion}, {"base", test.id}, {"entries", dist}}
                   .dump(2) + "\n");
  return {{"datasets", suite.size()}, {"base_digest", hex64(test.digest())}};
}

json cmd_few_shot(const CommandRequest& req, Context& ctx, Outputs& out) {
  auto models = load_inputs(req, 1);
  const auto ids = input_ids(req);
  const auto& f = ctx.cfg.at("few_shot");
  const auto weights = enumerate_weights(grid_from(ctx.cfg, models.size()));
  if (weights.empty()) throw ConfigError("config section 'search': grid has no candidates");
  auto data = load_data(ctx.cfg);
  const CorruptionSpec spec{parse_corruption(f.at("kind")), f.at("severity").get<int>(),
                            mix_seed(ctx.seed, kShiftStream)};
  const auto shifted = corrupt_dataset(data.second, spec);
  CandidateEvaluator ev(std::move(models), ids);
  const Metric metric = metric_from(ctx.cfg, ctx.seed);
  std::vector<Flags> flags;
  for (const auto& w : weights) flags.push_back(ev.flags(w, shifted.data, metric));
  FewShotConfig fc;
  fc.k_values = f.at("k_values").get<std::vector<std::size_t>>();
  fc.trials = f.at("trials");
  fc.heldout_size = f.at("heldout_size");
  fc.seed = mix_seed(ctx.seed, kFewShotStream);
  const auto res = few_shot_selection(weights, flags, fc);
  std::string csv = "schema_version,k,mean,std\n";
  json rows = json::array();
  for (const auto& r : res.rows) {
    csv += std::to_string(kReportSchemaVersion) + "," + std::to_string(r.k) + "," + fmt(r.mean) +
           "," + fmt(r.std) + "\n";
    rows.push_back({{"k", r.k}, {"mean", r.mean}, {"std", r.std}, {"trials", r.heldout_acc}});
    ctx.log << "k=" << r.k << " mean " << r.mean << " std " << r.std << "\n";
  }
  out.text("few_shot.csv", csv);
  out.text("few_shot.json", json{{"schema_version", kReportSchemaVersion},
                                 {"dataset", shifted.data.id},
                                 {"pool_size", res.pool_size},
                                 {"candidates", weights.size()},
                                 {"full_selection_acc", res.full_selection_acc},
                                 {"rows", rows}}
                                .dump(2) + "\n");
  return {{"dataset", shifted.data.id}, {"candidates_evaluated", weights.size()}};
}

json cmd_report(const CommandRequest& req, Context& ctx, Outputs& out) {
  const auto models = load_inputs(req, 2);
  const auto ids = input_ids(req);
  auto data = load_data(ctx.cfg);
  const Dataset test = eval_subset(data.second, ctx.cfg);
  const auto threats = threats_from(ctx.cfg, ctx.cfg.at("eval").at("threats"));
  const AttackConfig atk = eval_attack(ctx.cfg, ctx.seed);
  std::vector<SoupWeights> weights;
  if (models.size() == 2) {
    for (double w : ctx.cfg.at("sweep").at("w").get<std::vector<double>>())
      weights.emplace_back(std::vector<double>{w, 1.0 - w}, SoupMode::affine);
  } else {
    weights = enumerate_weights(grid_from(ctx.cfg, models.size()));
  }
  CandidateEvaluator ev(models, ids);
  std::string csv = "schema_version";
  for (const auto& id : ids) csv += ",w_" + id;
  csv += ",clean_acc";
  for (const auto& t : threats) csv += ",robust_" + t.name();
  csv += ",union_robust_acc\n";
  const auto fm = ctx.cfg.at("sweep").at("front_metrics").get<std::vector<std::string>>();
  if (fm.size() != 2) throw ConfigError("config key 'sweep.front_metrics': expected two names");
  std::vector<SweepPoint> sweep;
  for (const auto& w : weights) {
    const auto rep = evaluate_model(ev.soup(w), weights_label(w), test, threats, atk);
    csv += std::to_string(kReportSchemaVersion);
    for (double v : w.values()) csv += "," + fmt(v);
    csv += "," + fmt(rep.clean_acc);
    for (const auto& t : threats) csv += "," + fmt(rep.robust_acc.at(t.name()));
    csv += "," + fmt(rep.union_robust_acc) + "\n";
    auto metric = [&](const std::string& name) {
      if (name == "clean") return rep.clean_acc;
      if (name == "union") return rep.union_robust_acc;
      auto it = rep.robust_acc.find(name);
      if (it == rep.robust_acc.end()) {
        throw ConfigError("config key 'sweep.front_metrics': '" + name + "' is not evaluated");
      }
      return it->second;
    };
    sweep.push_back({w[0], metric(fm[0]), metric(fm[1])});
    ctx.log << weights_label(w) << ": clean " << rep.clean_acc << " union "
            << rep.union_robust_acc << "\n";
  }
  out.text("sweep.csv", csv);
  json front = json::array();
  for (const auto& e : tradeoff_front(sweep)) {
    front.push_back({{"w0", e.point.w},
                     {fm[0], e.point.metric_a},
                     {fm[1], e.point.metric_b},
                     {"dominated", e.dominated}});
  }
  out.text("front.json", json{{"schema_version", kReportSchemaVersion}, {"points", front}}
                             .dump(2) + "\n");
  return {{"soups_evaluated", weights.size()}};
}

}  // namespace

json default_config() {
  std::vector<double> sweep_w;
  for (int i = 0; i <= 10; ++i) sweep_w.push_back(i / 10.0);
  return json{
      {"seed", 0},
      {"dataset",
       {{"source", "shapes"},
        {"seed", 1},
        {"n_train", 3000},
        {"n_test", 2000},
        {"side", 16},
        {"train_path", ""},
        {"test_path", ""}}},
      {"arch", "cnn-16/1x16x16/10"},
      {"budgets", {{"linf", 0.05}, {"l2", 0.5}, {"l1", 3.0}}},
      {"train",
       {{"epochs", 30.0},
        {"batch_size", 64},
        {"peak_lr", 0.05},
        {"ramp_fraction", 0.1},
        {"momentum", 0.9},
        {"weight_decay", 5e-4},
        {"threats", {"linf"}},
        {"mode", "single"},
        {"attack_steps", 10},
        {"l1_attack_steps", 20},
        {"attack_loss", "cross_entropy"},
        {"validation_fraction", 0.1},
        {"validation_max_points", 500},
        {"finetune_lr_factor", 0.1}}},
      {"finetune",
       {{"epochs", 3.0}, {"target", "l2"}, {"mode", "single"}, {"threats", {"linf", "l1"}}}},
      {"eval",
       {{"n_points", 1000},
        {"threats", {"linf", "l2", "l1"}},
        {"attack_steps", 40},
        {"restarts", 1},
        {"attack_loss", "cross_entropy"},
        {"keep_flags", false}}},
      {"soup", {{"weights", json::array()}, {"mode", "affine"}}},
      {"sweep", {{"w", sweep_w}, {"front_metrics", {"linf", "l2"}}}},
      {"search",
       {{"lo", 0.0},
        {"hi", 1.0},
        {"step", 0.2},
        {"mode", "convex"},
        {"metric", "clean"},
        {"datasets", "clean"},
        {"adaptation_size", 1000},
        {"top_k", 5}}},
      {"shifts",
       {{"kinds", {"gaussian_noise", "blur", "pixelate", "quantize", "contrast"}},
        {"severities", {1, 2, 3, 4, 5}}}},
      {"few_shot",
       {{"kind", "pixelate"},
        {"severity", 3},
        {"k_values", {10, 30, 100, 300, 500}},
        {"trials", 50},
        {"heldout_size", 500}}}};
}

json resolve_config(const json& user) {
  if (!user.is_object()) throw ConfigError("config: top level must be an object");
  json cfg = default_config();
  check_against(cfg, user, "");
  merge_into(cfg, user);
  return cfg;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "': expected key=value");
  }
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json patch = value;
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string k; std::getline(ss, k, '.');) {
    if (k.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
    keys.push_back(k);
  }
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = json{{*it, patch}};
  const json schema = default_config();
  check_against(schema, patch, "");
  merge_into(config, patch);
}

std::string config_digest(const json& config) {
  Fnv1a h;
  h.update_string(config.dump());
  return hex64(h.digest());
}

std::string build_id() { return RSOUP_BUILD_ID; }

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train",       "finetune",     "attack-eval",
                                              "soup",        "soup-search",  "shift-suite",
                                              "few-shot",    "report"};
  return names;
}

json run_command(const CommandRequest& req, std::ostream& log) {
  const json cfg = resolve_config(req.config);
  const std::uint64_t seed = cfg.at("seed");
  fs::create_directories(req.out_dir);
  if (fs::exists(req.out_dir / "manifest.json")) {
    throw DataError("output directory '" + req.out_dir.string() + "' already holds a run");
  }
  Context ctx{cfg, seed, log};
  Outputs out(req.out_dir, log);

  json inputs = json::array();
  for (const auto& p : req.checkpoints) {
    inputs.push_back({{"path", fs::absolute(p).lexically_normal().string()},
                      {"digest", file_digest(p)}});
  }

  json extra;
  const std::string& c = req.command;
  if (c == "train") extra = cmd_train(req, ctx, out, false);
  else if (c == "finetune") extra = cmd_train(req, ctx, out, true);
  else if (c == "attack-eval") extra = cmd_attack_eval(req, ctx, out);
  else if (c == "soup") extra = cmd_soup(req, ctx, out);
  else if (c == "soup-search") extra = cmd_soup_search(req, ctx, out);
  else if (c == "shift-suite") extra = cmd_shift_suite(req, ctx, out);
  else if (c == "few-shot") extra = cmd_few_shot(req, ctx, out);
  else if (c == "report") extra = cmd_report(req, ctx, out);
  else throw std::invalid_argument("unknown command '" + c + "'");

  json manifest{{"schema_version", kManifestSchemaVersion},
                {"command", c},
                {"config", cfg},
                {"config_digest", config_digest(cfg)},
                {"seeds",
                 {{"master", seed},
                  {"dataset", cfg.at("dataset").at("seed")},
                  {"init", mix_seed(seed, kInitStream)},
                  {"attack", mix_seed(seed, kEvalStream)},
                  {"shift", mix_seed(seed, kShiftStream)},
                  {"few_shot", mix_seed(seed, kFewShotStream)}}},
                {"build_id", build_id()},
                {"inputs", inputs},
                {"outputs", out.list()},
                {"result", extra}};
  write_text_once(req.out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

ReplayResult replay_manifest(const fs::path& manifest_path, const fs::path& out_dir,
                             std::ostream& log) {
  json m;
  {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open manifest '" + manifest_path.string() + "'");
    m = json::parse(in, nullptr, false);
    if (m.is_discarded() || !m.is_object()) {
      throw DataError("manifest '" + manifest_path.string() + "' is not valid JSON");
    }
  }
  CommandRequest req;
  try {
    req.command = m.at("command");
    req.config = m.at("config");
    for (const auto& i : m.at("inputs")) {
      const fs::path p = i.at("path").get<std::string>();
      if (file_digest(p) != i.at("digest")) {
        throw DataError("replay: input '" + p.string() + "' changed since the recorded run");
      }
      req.checkpoints.push_back(p);
    }
  } catch (const json::exception& e) {
    throw DataError("manifest '" + manifest_path.string() + "': " + e.what());
  }
  if (config_digest(resolve_config(req.config)) != m.at("config_digest")) {
    throw DataError("replay: config digest does not match the recorded config");
  }
  req.out_dir = out_dir;
  ReplayResult r;
  r.manifest = run_command(req, log);
  std::map<std::string, std::string> now;
  for (const auto& o : r.manifest.at("outputs")) now[o.at("file")] = o.at("digest");
  for (const auto& o : m.at("outputs")) {
    auto it = now.find(o.at("file"));
    if (it == now.end() || it->second != o.at("digest")) r.mismatched.push_back(o.at("file"));
  }
  return r;
}

}  // namespace rsoup
