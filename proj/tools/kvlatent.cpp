#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "kvlatent/kvlatent.hpp"

using namespace kvlatent;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitFormat = 4;

constexpr std::size_t kStage1Tokens = 50000;
constexpr std::size_t kStage2Tokens = 200000;

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  return os;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  auto os = open_out(path);
  os << text;
  if (!os) throw FormatError("write to '" + path + "' failed");
}

RopeLayout layout_from_flag(const std::string& s) {
  return parse_rope_layout(s == "half-split" ? "half_split" : s);
}

RopeMode mode_from_flag(const std::string& s) {
  return parse_rope_mode(s == "freq-aware" ? "frequency_aware" : s);
}

std::pair<std::size_t, std::size_t> parse_band(const std::string& s) {
  const auto colon = s.find(':');
  std::size_t lo = 0, hi = 0;
  try {
    if (colon == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    lo = std::stoul(s.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument(s);
    hi = std::stoul(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument(s);
  } catch (const std::logic_error&) {
    throw ConfigError("--band expects LO:HI, got '" + s + "'");
  }
  return {lo, hi};
}

// --- rope-curve -------------------------------------------------------------

struct CurveArgs {
  double theta = 10000.0;
  std::size_t dim = 0;
  std::string mode = "standard";
  std::string layout = "half-split";
  std::size_t max_pos = kDefaultWindowEnd;
  std::string band;
  bool ideal = false;
  std::string out;
  std::size_t parent_dim = 0, stride = 1, phase = 0;
  std::string gnuplot;
};

void cmd_rope_curve(const CurveArgs& a) {
  DecaySeries s;
  std::string title;
  if (!a.band.empty()) {
    if (a.mode != "standard") throw ConfigError("--band applies to the standard schedule only");
    // Channels are numbered 1..dim; channel c belongs to frequency ceil(c / 2).
    const auto [lo, hi] = parse_band(a.band);
    if (lo < 1 || hi < lo || hi > a.dim)
      throw ConfigError("--band " + a.band + " outside channels 1.." + std::to_string(a.dim));
    s = band_series(a.theta, a.dim, (lo + 1) / 2, (hi + 1) / 2, a.max_pos + 1);
    title = "channels " + a.band + " of d=" + std::to_string(a.dim);
  } else {
    RopeConfig cfg{a.theta, a.dim, mode_from_flag(a.mode), layout_from_flag(a.layout), 0, 1, 0};
    if (cfg.mode == RopeMode::subsampled) {
      if (a.parent_dim == 0) throw ConfigError("--mode subsampled needs --parent-dim");
      cfg = RopeConfig::subsampled(a.theta, a.parent_dim, a.stride, a.phase, cfg.layout);
      if (a.dim != 0 && a.dim != cfg.dim)
        throw ConfigError("--dim " + std::to_string(a.dim) + " disagrees with --parent-dim/--stride");
    } else if (a.parent_dim != 0 || a.stride != 1 || a.phase != 0) {
      throw ConfigError("--parent-dim/--stride/--phase need --mode subsampled");
    }
    cfg.validate();
    s = decay_series(cfg, a.max_pos + 1);
    title = a.mode + " d=" + std::to_string(cfg.dim);
  }
  std::vector<double> ideal;
  if (a.ideal) {
    ideal.resize(s.size());
    parallel_for(s.size(), 16, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) ideal[i] = ideal_curve(a.theta, static_cast<double>(s.positions[i]));
    });
  }
  std::ostringstream csv;
  write_series_csv(csv, s, ideal);
  write_text(a.out, csv.str());
  if (!a.gnuplot.empty()) {
    std::ostringstream gp;
    gp << "set datafile separator ','\n"
       << "set key autotitle columnhead\n"
       << "set xlabel 'relative position'\n"
       << "set ylabel 'normalised similarity'\n"
       << "set title '" << title << " theta=" << format_sig9(a.theta) << "'\n"
       << "plot '" << (a.out.empty() ? "-" : a.out) << "' using 1:2 with lines";
    if (a.ideal) gp << ", '' using 1:3 with lines";
    gp << '\n';
    write_text(a.gnuplot, gp.str());
  }
}

// --- init / pretrain --------------------------------------------------------

struct InitArgs {
  std::size_t vocab = 256, d_model = 128, layers = 4, heads = 4, kv_heads = 2, dqk = 32, dvo = 32,
              d_ffn = 256, max_seq = 64;
  double theta = 10000.0;
  std::string rope = "standard";
  std::string layout = "half-split";
  std::uint64_t seed = 0;
  std::string out;
};

void cmd_init(const InitArgs& a) {
  ModelConfig c;
  c.vocab = a.vocab;
  c.d_model = a.d_model;
  c.n_layers = a.layers;
  c.geom = {a.d_model, a.heads, a.kv_heads, a.dqk, a.dvo};
  c.d_ffn = a.d_ffn;
  c.max_seq = a.max_seq;
  c.rope = {a.theta, a.dqk, mode_from_flag(a.rope), layout_from_flag(a.layout), 0, 1, 0};
  if (c.rope.mode == RopeMode::subsampled) throw ConfigError("init: --rope must be standard or freq-aware");
  save_checkpoint(Model<float>::random(c, a.seed), a.out);
}

struct TrainArgs {
  std::string stage = "2";
  std::string loss = "ce";
  std::string teacher, student, model, corpus, out, log, manifest;
  std::size_t steps = 0;
  bool steps_given = false;
  double lr = kLrTraining;
  std::uint64_t seed = 0;
  std::size_t batch = 8;
  std::size_t seq_len = 64;
  double adam_eps = AdamWConfig{}.eps;
  double weight_decay = AdamWConfig{}.weight_decay;
  bool kl_student_first = false;
};

std::vector<Sequence> training_split(const std::string& path, std::size_t seq_len, std::size_t max_seq) {
  return TokenCorpus::from_file(path, std::min(seq_len, max_seq)).train;
}

void finish_training(const TrainArgs& a, const Model<float>& m, const TrainLog& log,
                     const std::string& stage_name) {
  save_checkpoint(m, a.out);
  if (!a.log.empty()) {
    std::ostringstream os;
    write_log_csv(os, log);
    write_text(a.log, os.str());
  }
  if (!a.manifest.empty()) {
    std::ostringstream os;
    os << "command train\n"
       << "stage " << stage_name << '\n'
       << "teacher " << (a.teacher.empty() ? "-" : a.teacher) << '\n'
       << "student " << (a.student.empty() ? a.model : a.student) << '\n'
       << "corpus " << a.corpus << '\n'
       << "out " << a.out << '\n'
       << "steps " << log.size() << '\n'
       << "lr " << format_sig9(a.lr) << '\n'
       << "batch " << a.batch << '\n'
       << "seq_len " << a.seq_len << '\n'
       << "adam_eps " << format_sig9(a.adam_eps) << '\n'
       << "weight_decay " << format_sig9(a.weight_decay) << '\n'
       << "kl_order " << (a.kl_student_first ? "student_teacher" : "teacher_student") << '\n'
       << "seed " << a.seed << '\n'
       << "final_loss " << (log.empty() ? std::string("-") : format_sig9(log.back().loss)) << '\n';
    write_text(a.manifest, os.str());
  }
}

TrainConfig train_config(const TrainArgs& a, Stage stage, std::size_t default_tokens, std::size_t seq) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.lr = a.lr;
  cfg.batch = a.batch;
  cfg.seed = a.seed;
  cfg.adamw.eps = a.adam_eps;
  cfg.adamw.weight_decay = a.weight_decay;
  cfg.kl_teacher_first = !a.kl_student_first;
  cfg.steps = a.steps_given ? a.steps : std::max<std::size_t>(1, default_tokens / (a.batch * seq));
  cfg.validate();
  return cfg;
}

void cmd_train(const TrainArgs& a) {
  if (a.student.empty()) throw ConfigError("train: --student is required");
  Model<float> student = load_checkpoint<float>(a.student);
  const std::size_t seq = std::min(a.seq_len, student.config().max_seq);
  Stage stage;
  std::size_t tokens;
  if (a.stage == "1") {
    stage = Stage::one;
    tokens = kStage1Tokens;
  } else {
    stage = a.loss == "kl" ? Stage::two_kl : Stage::two_ntp;
    tokens = kStage2Tokens;
  }
  const bool needs_teacher = stage != Stage::two_ntp;
  if (needs_teacher && a.teacher.empty())
    throw ConfigError(std::string("train: ") + (stage == Stage::one ? "stage 1" : "--loss kl") +
                      " needs --teacher");
  TrainConfig cfg = train_config(a, stage, tokens, seq);
  if (cfg.steps == 0) {
    finish_training(a, student, {}, a.stage);
    return;
  }
  const auto data = training_split(a.corpus, seq, student.config().max_seq);
  std::optional<Model<float>> teacher;
  if (!a.teacher.empty()) teacher = load_checkpoint<float>(a.teacher);
  const TrainLog log = train(student, teacher ? &*teacher : nullptr, data, cfg);
  finish_training(a, student, log, a.stage == "1" ? "1" : "2-" + a.loss);
}

void cmd_pretrain(const TrainArgs& a) {
  if (a.model.empty()) throw ConfigError("pretrain: --model is required");
  Model<float> m = load_checkpoint<float>(a.model);
  const std::size_t seq = std::min(a.seq_len, m.config().max_seq);
  TrainConfig cfg = train_config(a, Stage::pretrain, kStage2Tokens, seq);
  if (cfg.steps == 0) {
    finish_training(a, m, {}, "pretrain");
    return;
  }
  const auto data = training_split(a.corpus, seq, m.config().max_seq);
  const TrainLog log = pretrain(m, data, cfg);
  finish_training(a, m, log, "pretrain");
}

// --- surgery / eval / budget ------------------------------------------------

struct SurgeryArgs {
  std::string in, out, report;
  std::size_t dqk = 0, dvo = 0;
  std::string rope = "freq-aware";
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  std::string selection = "strided";
  std::uint64_t seed = 0;
};

void cmd_surgery(const SurgeryArgs& a) {
  const auto src = load_checkpoint<float>(a.in);
  SurgeryOptions opt;
  opt.d_qk = a.dqk;
  opt.d_vo = a.dvo;
  opt.rope = a.rope == "subsampled" ? SurgeryRope::subsampled : SurgeryRope::frequency_aware;
  opt.lora_rank = a.lora_rank;
  opt.lora_alpha = a.lora_alpha;
  opt.selection = a.selection == "random" ? SelectionStrategy::random : SelectionStrategy::strided;
  opt.seed = a.seed;
  const auto [model, report] = run_surgery(src, opt);
  save_checkpoint(model, a.out);
  if (!a.report.empty()) write_text(a.report, to_json(report).dump(2) + "\n");
}

struct EvalArgs {
  std::string model, corpus, split = "heldout";
  std::size_t seq_len = 64, max_seqs = 0;
  bool csv = false;
};

void cmd_eval(const EvalArgs& a) {
  const auto m = load_checkpoint<float>(a.model);
  const auto corpus = TokenCorpus::from_file(a.corpus, std::min(a.seq_len, m.config().max_seq));
  std::vector<Sequence> seqs;
  if (a.split == "heldout" || a.split == "all") seqs = corpus.heldout;
  if (a.split == "train" || a.split == "all") seqs.insert(seqs.end(), corpus.train.begin(), corpus.train.end());
  if (seqs.empty()) throw ConfigError("eval: the " + a.split + " split is empty");
  if (a.max_seqs > 0 && seqs.size() > a.max_seqs) seqs.resize(a.max_seqs);
  const double lp = log_perplexity(m, seqs);
  std::size_t tokens = 0;
  for (const auto& s : seqs) tokens += s.size() - 1;
  if (a.csv)
    std::cout << "split,sequences,predicted_tokens,log_ppl\n"
              << a.split << ',' << seqs.size() << ',' << tokens << ',' << format_sig9(lp) << '\n';
  else
    std::cout << "log_ppl " << format_sig9(lp) << " (" << seqs.size() << " sequences, " << tokens
              << " predicted tokens, " << a.split << " split)\n";
}

struct BudgetArgs {
  std::size_t layers = 32, kv_heads = 8, dqk = 128, dvo = 128, base_dqk = 128, base_dvo = 128;
  std::string dtype = "bf16";
  std::uint64_t tokens = 4000, mem = 0;
  bool csv = false;
};

void cmd_budget(const BudgetArgs& a) {
  const std::uint64_t elem = a.dtype == "f32" ? 4 : 2;
  const HeadGeometry g{0, 0, a.kv_heads, a.dqk, a.dvo};
  const HeadGeometry base{0, 0, a.kv_heads, a.base_dqk, a.base_dvo};
  const auto r = budget_report(g, base, a.layers, elem, a.tokens, a.mem);
  std::ostringstream os;
  if (a.csv) {
    write_budget_csv(os, {r});
  } else {
    write_budget_text(os, {r});
    char ratio[32];
    std::snprintf(ratio, sizeof ratio, "%.9f", r.ratio.value());
    os << "ratio vs " << a.base_dqk << '/' << a.base_dvo << " baseline: " << r.ratio.str() << " = "
       << ratio << '\n';
  }
  std::cout << os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KV-Latent toolkit: reduced-dimension attention heads, rotary analysis and cache budgets"};
  app.require_subcommand(1);

  CurveArgs curve;
  auto* rc = app.add_subcommand("rope-curve", "Normalised rotary similarity versus relative position");
  rc->add_option("--theta", curve.theta, "rotary base")->capture_default_str();
  rc->add_option("--dim", curve.dim, "head dimension (channels)");
  rc->add_option("--mode", curve.mode)->check(CLI::IsMember({"standard", "freq-aware", "subsampled"}))->capture_default_str();
  rc->add_option("--layout", curve.layout)->check(CLI::IsMember({"half-split", "adjacent"}))->capture_default_str();
  rc->add_option("--max-pos", curve.max_pos, "last position written")->capture_default_str();
  rc->add_option("--band", curve.band, "restrict to channels LO:HI (1-based, inclusive)");
  rc->add_flag("--ideal", curve.ideal, "add the infinite-dimension limit as an 'ideal' column");
  rc->add_option("--out", curve.out, "CSV path (stdout when omitted)");
  rc->add_option("--parent-dim", curve.parent_dim);
  rc->add_option("--stride", curve.stride)->capture_default_str();
  rc->add_option("--phase", curve.phase)->capture_default_str();
  rc->add_option("--gnuplot", curve.gnuplot, "also write a gnuplot script");

  InitArgs init;
  auto* ic = app.add_subcommand("init", "Write a randomly initialised model");
  ic->add_option("--vocab", init.vocab)->capture_default_str();
  ic->add_option("--d-model", init.d_model)->capture_default_str();
  ic->add_option("--layers", init.layers)->capture_default_str();
  ic->add_option("--heads", init.heads)->capture_default_str();
  ic->add_option("--kv-heads", init.kv_heads)->capture_default_str();
  ic->add_option("--dqk", init.dqk)->capture_default_str();
  ic->add_option("--dvo", init.dvo)->capture_default_str();
  ic->add_option("--d-ffn", init.d_ffn)->capture_default_str();
  ic->add_option("--max-seq", init.max_seq)->capture_default_str();
  ic->add_option("--theta", init.theta)->capture_default_str();
  ic->add_option("--rope", init.rope)->check(CLI::IsMember({"standard", "freq-aware"}))->capture_default_str();
  ic->add_option("--layout", init.layout)->check(CLI::IsMember({"half-split", "adjacent"}))->capture_default_str();
  ic->add_option("--seed", init.seed)->capture_default_str();
  ic->add_option("--out", init.out)->required();

  TrainArgs pre;
  pre.lr = 3e-3;
  pre.adam_eps = 1e-8;
  auto* pc = app.add_subcommand("pretrain", "Next-token training of every weight");
  pc->add_option("--model", pre.model)->required();
  pc->add_option("--corpus", pre.corpus)->required();
  pc->add_option("--out", pre.out)->required();
  auto* pre_steps = pc->add_option("--steps", pre.steps);
  pc->add_option("--lr", pre.lr)->capture_default_str();
  pc->add_option("--seed", pre.seed)->capture_default_str();
  pc->add_option("--batch", pre.batch)->check(CLI::PositiveNumber)->capture_default_str();
  pc->add_option("--seq-len", pre.seq_len)->capture_default_str();
  pc->add_option("--adam-eps", pre.adam_eps)->capture_default_str();
  pc->add_option("--weight-decay", pre.weight_decay)->capture_default_str();
  pc->add_option("--log", pre.log, "loss log CSV");
  pc->add_option("--manifest", pre.manifest, "run manifest (config echo and seed)");

  SurgeryArgs surg;
  auto* sc = app.add_subcommand("surgery", "Reduce head dimensions of a trained model");
  sc->add_option("--in", surg.in)->required();
  sc->add_option("--out", surg.out)->required();
  sc->add_option("--dqk", surg.dqk)->required();
  sc->add_option("--dvo", surg.dvo)->required();
  sc->add_option("--rope", surg.rope)->check(CLI::IsMember({"subsampled", "freq-aware"}))->capture_default_str();
  sc->add_option("--lora-rank", surg.lora_rank, "0 disables adapters")->capture_default_str();
  sc->add_option("--lora-alpha", surg.lora_alpha)->capture_default_str();
  sc->add_option("--selection", surg.selection)->check(CLI::IsMember({"strided", "random"}))->capture_default_str();
  sc->add_option("--seed", surg.seed)->capture_default_str();
  sc->add_option("--report", surg.report, "JSON report path");

  TrainArgs tr;
  auto* tc = app.add_subcommand("train", "Recovery training (stage 1: hidden-state MSE, stage 2: ce or kl)");
  tc->add_option("--stage", tr.stage)->check(CLI::IsMember({"1", "2"}))->required();
  tc->add_option("--loss", tr.loss)->check(CLI::IsMember({"ce", "kl"}))->capture_default_str();
  tc->add_option("--teacher", tr.teacher);
  tc->add_option("--student", tr.student)->required();
  tc->add_option("--corpus", tr.corpus)->required();
  tc->add_option("--out", tr.out)->required();
  auto* tr_steps = tc->add_option("--steps", tr.steps, "default: 50k tokens (stage 1) or 200k (stage 2)");
  tc->add_option("--lr", tr.lr)->capture_default_str();
  tc->add_option("--seed", tr.seed)->capture_default_str();
  tc->add_option("--batch", tr.batch)->check(CLI::PositiveNumber)->capture_default_str();
  tc->add_option("--seq-len", tr.seq_len)->capture_default_str();
  tc->add_option("--adam-eps", tr.adam_eps)->capture_default_str();
  tc->add_option("--weight-decay", tr.weight_decay)->capture_default_str();
  tc->add_flag("--kl-student-first", tr.kl_student_first, "use KL(student || teacher)");
  tc->add_option("--log", tr.log, "loss log CSV");
  tc->add_option("--manifest", tr.manifest, "run manifest (config echo and seed)");

  EvalArgs ev;
  auto* ec = app.add_subcommand("eval", "Log perplexity on a text corpus");
  ec->add_option("--model", ev.model)->required();
  ec->add_option("--corpus", ev.corpus)->required();
  ec->add_option("--split", ev.split)->check(CLI::IsMember({"heldout", "train", "all"}))->capture_default_str();
  ec->add_option("--seq-len", ev.seq_len)->capture_default_str();
  ec->add_option("--max-seqs", ev.max_seqs, "0: all")->capture_default_str();
  ec->add_flag("--csv", ev.csv);

  BudgetArgs bud;
  auto* bc = app.add_subcommand("budget", "KV-cache footprint and reduction ratio");
  bc->add_option("--layers", bud.layers)->capture_default_str();
  bc->add_option("--kv-heads", bud.kv_heads)->capture_default_str();
  bc->add_option("--dqk", bud.dqk)->capture_default_str();
  bc->add_option("--dvo", bud.dvo)->capture_default_str();
  bc->add_option("--base-dqk", bud.base_dqk)->capture_default_str();
  bc->add_option("--base-dvo", bud.base_dvo)->capture_default_str();
  bc->add_option("--dtype", bud.dtype)->check(CLI::IsMember({"bf16", "f32"}))->capture_default_str();
  bc->add_option("--tokens", bud.tokens)->capture_default_str();
  bc->add_option("--mem", bud.mem, "memory budget in bytes (0: skip n_max)")->capture_default_str();
  bc->add_flag("--csv", bud.csv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (rc->parsed()) {
      cmd_rope_curve(curve);
    } else if (ic->parsed()) {
      cmd_init(init);
    } else if (pc->parsed()) {
      pre.steps_given = pre_steps->count() > 0;
      cmd_pretrain(pre);
    } else if (sc->parsed()) {
      cmd_surgery(surg);
    } else if (tc->parsed()) {
      tr.steps_given = tr_steps->count() > 0;
      cmd_train(tr);
    } else if (ec->parsed()) {
      cmd_eval(ev);
    } else if (bc->parsed()) {
      cmd_budget(bud);
    }
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFormat;
  }
  return 0;
}
