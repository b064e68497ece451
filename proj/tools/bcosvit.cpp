// Command-line front end: train, explain, bench, grids, perturb, selfcheck.
//
// Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.

#include "bcosvit/image_io.hpp"
#include "bcosvit/selfcheck.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace bcosvit;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3 };

struct CheckFailure : Error {
  using Error::Error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "run";
};

KeyValues read_config(const Common& c, const KeyValues& base = {}) {
  KeyValues kv = base;
  if (!c.config_path.empty()) {
    std::ifstream is(c.config_path);
    if (!is) throw IoError("cannot open config '" + c.config_path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    kv.merge(KeyValues::parse(ss.str()));
  }
  for (auto& o : c.overrides) {
    auto [k, v] = KeyValues::parse_override(o);
    kv.set(k, v);
  }
  return kv;
}

fs::path prepare_out(const Common& c, const KeyValues& resolved) {
  const fs::path out = c.out_dir;
  for (const char* d : {"checkpoints", "explanations", "reports"}) fs::create_directories(out / d);
  std::ofstream os(out / "config.resolved");
  if (!os) throw IoError("cannot write '" + (out / "config.resolved").string() + "'");
  os << resolved.to_text();
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os || !(os << text)) throw IoError("cannot write '" + p.string() + "'");
}

/// Config with every key the command reads recorded, so the snapshot alone
/// reproduces the run.
KeyValues resolved_config(const BcosViTConfig& m, const ShapesDataset& d, const KeyValues& extra) {
  KeyValues kv = m.to_kv();
  kv.merge(d.to_kv());
  kv.merge(extra);
  return kv;
}

// ---------------------------------------------------------------------------

int cmd_train(const Common& c, bool resume) {
  KeyValues kv = read_config(c);
  const auto cfg = BcosViTConfig::from_kv(kv);
  const auto data = ShapesDataset::from_kv(kv, cfg);
  const auto tc = TrainConfig::from_kv(kv);
  kv.require_all_used();
  const fs::path out = prepare_out(c, resolved_config(cfg, data, tc.to_kv()));
  BcosViT<float> m(cfg, tc.seed);
  std::ofstream log(out / "reports" / "train.log", resume ? std::ios::app : std::ios::trunc);
  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    int overflow(int ch) override {
      if (ch == EOF) return 0;
      a->sputc(char(ch));
      b->sputc(char(ch));
      return ch;
    }
    int sync() override { return a->pubsync() | b->pubsync(); }
  } tee;
  tee.a = std::cout.rdbuf();
  tee.b = log.rdbuf();
  std::ostream both(&tee);
  TrainOptions opt;
  opt.checkpoint_dir = out / "checkpoints";
  opt.resume = resume;
  opt.log = &both;
  const auto r = train(m, data, tc, opt);
  both << "best_epoch=" << r.best_epoch << " best_val_acc=" << r.best_val_acc << std::endl;
  return kOk;
}

struct Loaded {
  BcosViT<float> model;
  KeyValues config;  // checkpoint config overlaid with file and overrides
};

Loaded load_model(const Common& c, const std::string& checkpoint) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(checkpoint)) throw IoError("checkpoint '" + checkpoint + "' does not exist");
  const Checkpoint ck = load_checkpoint(checkpoint);
  KeyValues base;
  for (auto& [k, v] : ck.config.entries())
    if (k.rfind("data.", 0) == 0) base.set(k, v);
  return {model_from_checkpoint(ck), read_config(c, base)};
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = KeyValues::trim(item);
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("bad class index '" + item + "'");
    out.push_back(std::stoul(item));
  }
  return out;
}

std::vector<Method> parse_methods(const std::string& s) {
  std::vector<Method> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_method(KeyValues::trim(item)));
  if (out.empty()) throw ConfigError("no methods given");
  return out;
}

int cmd_explain(const Common& c, const std::string& checkpoint, const std::string& image, long index,
                const std::string& classes, const std::string& methods) {
  auto [m, kv] = load_model(c, checkpoint);
  const auto& cfg = m.config();
  const auto data = ShapesDataset::from_kv(kv, cfg);
  const std::size_t steps = kv.count("explain.intgrad_steps", 32);
  kv.require_all_used();
  const auto method_list = parse_methods(methods);
  const auto class_list = classes.empty() ? std::vector<std::size_t>{} : parse_list(classes);

  Tensor<float> rgb;
  std::string stem;
  if (!image.empty()) {
    rgb = load_ppm(image);
    stem = fs::path(image).stem().string();
  } else {
    if (index < 0) throw ConfigError("give --image or --index");
    rgb = data.rgb(Split::val, std::size_t(index)).first;
    stem = "val" + std::to_string(index);
  }
  if (rgb.dims() != Dims{3, cfg.image_size, cfg.image_size})
    throw ConfigError("image extent " + dims_str(rgb.dims()) + " does not match the model input");
  const Tensor<float> x = encode_image(rgb).pixels;
  std::vector<std::size_t> ks = class_list;
  const Tensor<float> logits = forward(m, x.reshaped(Dims{1, x.numel()}));
  if (ks.empty()) ks.push_back(argmax_row(logits, 0));
  for (auto k : ks)
    if (k >= cfg.classes) throw ConfigError("class " + std::to_string(k) + " out of range");
  for (auto method : method_list)
    if (method == Method::inherent && !cfg.exact())
      throw ConfigError("method inherent needs an exact (shifted-LayerNorm) checkpoint");

  KeyValues extra;
  extra.set("explain.intgrad_steps", std::to_string(steps));
  const fs::path out = prepare_out(c, resolved_config(cfg, data, extra));
  const fs::path dir = out / "explanations";
  save_ppm(dir / (stem + "_input.ppm"), rgb);
  for (auto k : ks) {
    for (auto method : method_list) {
      const auto map = explain(m, x, ExplainerSpec{method, steps, k});
      const std::string base = stem + "_k" + std::to_string(k) + "_" + to_string(method);
      save_ppm(dir / (base + ".ppm"), render_heatmap(map));
      save_bct1(dir / (base + ".bct"), map.values);
      if (method == Method::inherent) {
        AdjointExtractor<float> ex(m, x);
        const Tensor<float> row = ex.row(k);
        const double total = map.values.sum();
        const double target = double(ex.logits()[k]) - double(ex.bias(k));
        save_ppm(dir / (base + "_colour.ppm"),
                 composite(render_colour_weights(row, x, cfg.image_size, cfg.image_size)));
        std::cout << std::setprecision(8) << "class=" << k << " sum_contributions=" << total
                  << " logit_minus_bias=" << target << " abs_diff=" << std::abs(total - target) << '\n';
      }
    }
  }
  return kOk;
}

BenchmarkOptions bench_options(const KeyValues& kv) {
  BenchmarkOptions o;
  o.grids = kv.count("bench.grids", o.grids);
  o.images = kv.count("bench.images", o.images);
  o.intgrad_steps = kv.count("bench.intgrad_steps", o.intgrad_steps);
  o.seed = kv.count("bench.seed", o.seed);
  o.methods = parse_methods(kv.str("bench.methods", "inherent,finatt,rollout,ixg,intgrad"));
  return o;
}

KeyValues bench_kv(const BenchmarkOptions& o) {
  KeyValues kv;
  kv.set("bench.grids", std::to_string(o.grids));
  kv.set("bench.images", std::to_string(o.images));
  kv.set("bench.intgrad_steps", std::to_string(o.intgrad_steps));
  kv.set("bench.seed", std::to_string(o.seed));
  std::string ms;
  for (auto m : o.methods) ms += (ms.empty() ? "" : ",") + to_string(m);
  kv.set("bench.methods", ms);
  return kv;
}

int cmd_bench(const Common& c, const std::string& checkpoint) {
  auto [m, kv] = load_model(c, checkpoint);
  const auto data = ShapesDataset::from_kv(kv, m.config());
  const auto o = bench_options(kv);
  kv.require_all_used();
  const fs::path out = prepare_out(c, resolved_config(m.config(), data, bench_kv(o)));
  const auto report = run_benchmark(m, data, o);
  std::cout << report.table();
  write_text(out / "reports" / "benchmark.tsv", report.table());
  write_text(out / "reports" / "benchmark.txt", report.records());
  for (auto& r : report.rows)
    if (!r.ok) return kCheckFailed;
  return kOk;
}

int cmd_grids(const Common& c, const std::string& checkpoint) {
  auto [m, kv] = load_model(c, checkpoint);
  const auto data = ShapesDataset::from_kv(kv, m.config());
  auto o = bench_options(kv);
  kv.require_all_used();
  const fs::path out = prepare_out(c, resolved_config(m.config(), data, bench_kv(o)));
  const auto grids = build_grids(data, m, o.grids, o.seed);
  std::ostringstream tsv;
  tsv << "grid\tclass\tcell";
  for (auto method : o.methods) tsv << '\t' << to_string(method);
  tsv << '\n' << std::setprecision(6);
  std::map<Method, double> mean;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    save_ppm(out / "explanations" / ("grid" + std::to_string(i) + ".ppm"), grids[i].rgb);
    const Tensor<float> x = encode_image(grids[i].rgb).pixels;
    for (std::size_t cell = 0; cell < 4; ++cell) {
      const std::size_t k = grids[i].labels[cell];
      tsv << i << '\t' << k << '\t' << cell;
      for (auto method : o.methods) {
        const double s = localisation_score(explain(m, x, ExplainerSpec{method, o.intgrad_steps, k}), grids[i], k);
        mean[method] += s / double(4 * grids.size());
        tsv << '\t' << s;
      }
      tsv << '\n';
    }
  }
  write_text(out / "reports" / "grids.tsv", tsv.str());
  std::ostringstream rec;
  for (auto method : o.methods) rec << "method=" << to_string(method) << " localisation=" << mean[method] << '\n';
  write_text(out / "reports" / "grids.txt", rec.str());
  std::cout << rec.str();
  return kOk;
}

int cmd_perturb(const Common& c, const std::string& checkpoint) {
  auto [m, kv] = load_model(c, checkpoint);
  const auto data = ShapesDataset::from_kv(kv, m.config());
  auto o = bench_options(kv);
  kv.require_all_used();
  const fs::path out = prepare_out(c, resolved_config(m.config(), data, bench_kv(o)));
  const auto images = select_perturbation_images(m, data, o.images);
  std::ostringstream tsv, rec;
  tsv << "method\torder";
  for (double f : perturbation_fractions()) tsv << '\t' << f;
  tsv << '\n' << std::setprecision(6);
  for (auto method : o.methods) {
    std::vector<PerturbationCurve> most, least;
    for (std::size_t i : images) {
      auto [rgb, label] = data.rgb(Split::val, i);
      const auto map = explain(m, encode_image(rgb).pixels, ExplainerSpec{method, o.intgrad_steps, label});
      auto [mf, lf] = perturbation_curves(m, rgb, label, map.values);
      most.push_back(mf);
      least.push_back(lf);
    }
    const auto mf = mean_curve(most), lf = mean_curve(least);
    for (auto* pc : {&mf, &lf}) {
      tsv << to_string(method) << '\t' << (pc->order == Order::most_first ? "most_first" : "least_first");
      for (double v : pc->confidences) tsv << '\t' << v;
      tsv << '\n';
    }
    rec << "method=" << to_string(method) << " abc=" << area_between_curves(mf, lf) << '\n';
  }
  write_text(out / "reports" / "perturb.tsv", tsv.str());
  write_text(out / "reports" / "perturb.txt", rec.str());
  std::cout << rec.str();
  return kOk;
}

int cmd_selfcheck(const Common& c, const std::string& fault) {
  KeyValues kv = read_config(c);
  SelfCheckOptions o;
  o.seed = kv.count("selfcheck.seed", o.seed);
  o.inputs = kv.count("selfcheck.inputs", o.inputs);
  o.bcos_cases = kv.count("selfcheck.bcos_cases", o.bcos_cases);
  o.fault = parse_fault(kv.str("selfcheck.fault", fault));
  kv.require_all_used();
  KeyValues resolved;
  resolved.set("selfcheck.seed", std::to_string(o.seed));
  resolved.set("selfcheck.inputs", std::to_string(o.inputs));
  resolved.set("selfcheck.bcos_cases", std::to_string(o.bcos_cases));
  resolved.set("selfcheck.fault", kv.str("selfcheck.fault", fault));
  const fs::path out = prepare_out(c, resolved);
  const auto checks = run_selfcheck(o);
  const std::string text = format_checks(checks);
  std::cout << text;
  write_text(out / "reports" / "selfcheck.txt", text);
  const auto failed = std::count_if(checks.begin(), checks.end(), [](auto& r) { return !r.passed; });
  std::cout << (failed ? "selfcheck FAILED: " : "selfcheck passed: ") << checks.size() - failed << "/" << checks.size()
            << " checks\n";
  return failed ? kCheckFailed : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"B-cos vision transformer: training, explanations and interpretability metrics"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "config file of key = value lines");
    sub->add_option("-s,--set", common.overrides, "override key=value (repeatable)");
    sub->add_option("-o,--out", common.out_dir, "output directory")->capture_default_str();
  };

  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "train a model on the shapes dataset");
  add_common(train_cmd);
  train_cmd->add_flag("--resume", resume, "continue from checkpoints/last.bckp");

  std::string checkpoint, image, classes, methods = "inherent", fault = "none";
  long index = -1;
  auto* explain_cmd = app.add_subcommand("explain", "write explanation maps for one image");
  add_common(explain_cmd);
  explain_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  explain_cmd->add_option("--image", image, "binary PPM image");
  explain_cmd->add_option("--index", index, "validation-split index instead of an image");
  explain_cmd->add_option("--classes", classes, "comma-separated class indices (default: predicted class)");
  explain_cmd->add_option("--methods", methods, "comma-separated: inherent,finatt,rollout,ixg,intgrad")
      ->capture_default_str();

  std::vector<CLI::App*> metric_cmds;
  for (auto [name, help] : {std::pair{"bench", "grid pointing game and pixel perturbation for all methods"},
                            std::pair{"grids", "grid pointing game only"},
                            std::pair{"perturb", "pixel perturbation only"}}) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    sub->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    metric_cmds.push_back(sub);
  }

  auto* self_cmd = app.add_subcommand("selfcheck", "run the invariant suite on random models");
  add_common(self_cmd);
  self_cmd->add_option("--fault", fault, "inject a fault: none, drop_skip, grad")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(common, resume);
    if (*explain_cmd) return cmd_explain(common, checkpoint, image, index, classes, methods);
    if (*metric_cmds[0]) return cmd_bench(common, checkpoint);
    if (*metric_cmds[1]) return cmd_grids(common, checkpoint);
    if (*metric_cmds[2]) return cmd_perturb(common, checkpoint);
    if (*self_cmd) return cmd_selfcheck(common, fault);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kUsage;
}
