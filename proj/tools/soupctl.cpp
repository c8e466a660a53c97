// soupctl: train, fine-tune, evaluate and combine robust models.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "rsoup/checkpoint.hpp"
#include "rsoup/experiment.hpp"
#include "rsoup/parallel.hpp"
#include "rsoup/training.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kNumeric = 4 };

nlohmann::json read_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw rsoup::ConfigError("cannot open config file '" + path + "'");
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw rsoup::ConfigError("config file '" + path + "' is not valid JSON");
  return j;
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarially robust model soups"};
  app.require_subcommand(1);
  app.set_version_flag("--version", rsoup::build_id());

  std::string config_path, out_dir;
  std::vector<std::string> overrides, checkpoints;
  std::size_t threads = 0;
  auto add_common = [&](CLI::App* sub, bool takes_checkpoints) {
    sub->add_option("-c,--config", config_path, "Experiment config (JSON)");
    sub->add_option("--set", overrides, "Override a config key: key.path=value (repeatable)")
        ->allow_extra_args(false)
        ->take_all();
    sub->add_option("-o,--out", out_dir, "Output directory (env SOUP_OUT_DIR)");
    sub->add_option("-j,--threads", threads, "Worker threads (env SOUP_THREADS)");
    if (takes_checkpoints) sub->add_option("checkpoints", checkpoints, "Input checkpoints");
  };
  const std::map<std::string, std::string> help{
      {"train", "Train a model from scratch"},
      {"finetune", "Fine-tune a checkpoint to another threat model"},
      {"attack-eval", "Clean, per-threat and union robust accuracy"},
      {"soup", "Combine checkpoints with fixed weights"},
      {"soup-search", "Grid search over soup weights"},
      {"shift-suite", "Materialize the corruption suite"},
      {"few-shot", "Few-shot soup selection on a shifted dataset"},
      {"report", "Weight sweep with trade-off front"}};
  for (const auto& name : rsoup::command_names()) {
    add_common(app.add_subcommand(name, help.at(name)), name != "train" && name != "shift-suite");
  }
  std::string manifest;
  auto* replay = app.add_subcommand("replay", "Re-run a manifest and compare output digests");
  replay->add_option("manifest", manifest, "manifest.json of an earlier run")->required();
  replay->add_option("-o,--out", out_dir, "Output directory (env SOUP_OUT_DIR)");
  replay->add_option("-j,--threads", threads, "Worker threads (env SOUP_THREADS)");
  auto* print = app.add_subcommand("config", "Print the resolved config");
  print->add_option("-c,--config", config_path, "Experiment config (JSON)");
  print->add_option("--set", overrides, "Override a config key")->allow_extra_args(false)->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (threads == 0) threads = std::stoul(env_or("SOUP_THREADS", "0"));
    if (threads) rsoup::set_num_threads(threads);
    if (out_dir.empty()) out_dir = env_or("SOUP_OUT_DIR", "");

    auto* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();
    auto config = [&] {
      auto cfg = rsoup::resolve_config(read_config(config_path));
      for (const auto& o : overrides) rsoup::apply_override(cfg, o);
      return rsoup::resolve_config(cfg);
    };
    if (cmd == "config") {
      std::cout << config().dump(2) << "\n";
      return kOk;
    }
    if (out_dir.empty()) {
      std::cerr << "error: no output directory (use --out or SOUP_OUT_DIR)\n";
      return kUsage;
    }
    if (cmd == "replay") {
      const auto r = rsoup::replay_manifest(manifest, out_dir, std::cerr);
      if (!r.mismatched.empty()) {
        for (const auto& f : r.mismatched) std::cerr << "digest mismatch: " << f << "\n";
        return kFailure;
      }
      std::cout << "replay matched " << r.manifest.at("outputs").size() << " output(s)\n";
      return kOk;
    }
    rsoup::CommandRequest req{cmd, config(), {}, out_dir};
    for (const auto& c : checkpoints) req.checkpoints.emplace_back(c);
    const auto m = rsoup::run_command(req, std::cerr);
    std::cout << m.at("result").dump() << "\n";
    return kOk;
  } catch (const rsoup::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const rsoup::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const rsoup::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kData;
  } catch (const rsoup::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
