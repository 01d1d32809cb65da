// Acceptance run: one PASS/FAIL line per criterion, detail lines indented.
// Exit status is non-zero when any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kvlatent/kvlatent.hpp"
#include "support/random.hpp"
#include "support/toy_corpus.hpp"

using namespace kvlatent;
namespace fs = std::filesystem;

namespace {

int failures = 0;
int ran = 0;
std::set<int> selected;  // empty: run all

void detail(const std::string& s) { std::cout << "    " << s << '\n' << std::flush; }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void run_criterion(int n, const std::string& title, const std::function<bool()>& body) {
  if (!selected.empty() && !selected.count(n)) return;
  ++ran;
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = false;
  try {
    ok = body();
  } catch (const std::exception& e) {
    detail(std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("criterion %2d %s  %s (%.1f s)\n", n, ok ? "PASS" : "FAIL", title.c_str(), secs);
  std::fflush(stdout);
  if (!ok) ++failures;
}

// --- 1-4: rotary analytics -------------------------------------------------

bool zero_point() {
  bool ok = true;
  for (std::size_t d : {16u, 64u, 256u, 100000u}) {
    const double v = rope_similarity(RopeConfig::standard(10000, d), 0.0);
    detail("d=" + std::to_string(d) + " similarity(0)=" + fmt(v));
    ok &= v == static_cast<double>(d);
  }
  return ok;
}

bool ideal_limit() {
  const auto freqs = make_frequencies(RopeConfig::standard(10000, 100000));
  bool ok = true;
  for (double x : {1.0, 10.0, 100.0, 1000.0}) {
    const double s = rope_similarity(freqs, x) / 100000.0;
    const double ideal = ideal_curve(10000, x);
    const double err = std::abs(s - ideal);
    detail("x=" + fmt(x) + " normalised=" + fmt(s) + " ideal=" + fmt(ideal) + " |diff|=" + fmt(err));
    ok &= err < 1e-3;
  }
  return ok;
}

bool instability() {
  const auto m16 = stability_metrics(decay_series(RopeConfig::standard(10000, 16), 8193), 0, 8192);
  const auto m256 = stability_metrics(decay_series(RopeConfig::standard(10000, 256), 8193), 0, 8192);
  detail("d=16  tail_oscillation=" + fmt(m16.tail_oscillation) + " attenuation=" + fmt(m16.attenuation) +
         " need >= " + fmt(0.5 * m16.attenuation));
  detail("d=256 tail_oscillation=" + fmt(m256.tail_oscillation) + " attenuation=" + fmt(m256.attenuation) +
         " need < " + fmt(0.1 * m256.attenuation));
  const bool a = m16.tail_oscillation >= 0.5 * m16.attenuation;
  const bool b = m256.tail_oscillation < 0.1 * m256.attenuation;
  detail(std::string("d=16 part ") + (a ? "holds" : "fails") + ", d=256 part " + (b ? "holds" : "fails"));
  return a && b;
}

bool dominance() {
  bool ok = true;
  for (std::size_t d : {16u, 32u, 64u, 128u}) {
    const auto std_f = make_frequencies(RopeConfig::standard(10000, d));
    const auto fa_f = make_frequencies(RopeConfig::frequency_aware(10000, d));
    double worst = 1e300;
    for (int x = 0; x <= 4096; ++x)
      worst = std::min(worst, rope_similarity(fa_f, x) - rope_similarity(std_f, x));
    detail("d=" + std::to_string(d) + " min(freq-aware - standard)=" + fmt(worst));
    ok &= worst >= -1e-9;
  }
  const auto s = decay_series(RopeConfig::standard(10000, 16), 8193);
  const auto f = decay_series(RopeConfig::frequency_aware(10000, 16), 8193);
  std::size_t ns = 0, nf = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    ns += s.values[i] < 0.0;
    nf += f.values[i] < 0.0;
  }
  detail("d=16 negative values on [0, 8192]: standard " + std::to_string(ns) + ", freq-aware " +
         std::to_string(nf));
  return ok && nf < ns;
}

// --- 5-8: surgery, cache, gradients, budget --------------------------------

bool commutation() {
  std::mt19937_64 rng(55);
  const RopeConfig parent = RopeConfig::standard(10000, 128, RopeLayout::half_split);
  const RotaryTable pt(parent, 8192);
  std::size_t checked = 0, equal = 0;
  for (std::size_t stride : {2u, 4u}) {
    const RotaryTable ct(derive_rope_subsample(parent, stride), 8192);
    for (int n = 0; n < 100; ++n) {
      const auto v = kvtest::randv<double>(128, rng);
      const std::size_t pos = rng() % 8192;
      const auto a = downsample_vector<double>(apply_rope<double>(v, pos, pt), stride);
      const auto b = apply_rope<double>(downsample_vector<double>(v, stride), pos, ct);
      ++checked;
      equal += a == b;
    }
  }
  detail(std::to_string(equal) + "/" + std::to_string(checked) + " vectors bit-identical");
  return equal == checked;
}

bool cache_equivalence() {
  std::mt19937_64 rng(66);
  std::vector<HeadGeometry> geoms = {{16, 4, 2, 6, 10}, {64, 2, 1, 16, 64}};
  const std::size_t qk[] = {2, 4, 6, 8, 16, 32};
  const std::size_t vo[] = {2, 3, 8, 10, 24, 64};
  const std::size_t heads[][2] = {{1, 1}, {2, 1}, {4, 2}, {4, 4}, {6, 2}, {8, 2}};
  while (geoms.size() < 20) {
    const auto& h = heads[rng() % 6];
    geoms.push_back({8 * (1 + rng() % 8), h[0], h[1], qk[rng() % 6], vo[rng() % 6]});
  }
  double worst = 0.0;
  std::size_t decoupled = 0;
  for (const auto& g : geoms) {
    decoupled += g.d_qk != g.d_vo;
    const AttentionWeights<double> w{kvtest::randn(g.d_model, g.n_heads * g.d_qk, rng, 0.4),
                                     kvtest::randn(g.d_model, g.n_kv_heads * g.d_qk, rng, 0.4),
                                     kvtest::randn(g.d_model, g.n_kv_heads * g.d_vo, rng, 0.4),
                                     kvtest::randn(g.n_heads * g.d_vo, g.d_model, rng, 0.4)};
    const RotaryTable t(RopeConfig::standard(10000, g.d_qk), 48);
    const std::size_t n = 8 + rng() % 40;
    const auto H = kvtest::randn(n, g.d_model, rng);
    const auto full = attend_full(H, w, g, t);
    KvCache<double> cache(1, g);
    for (std::size_t p = 0; p < n; ++p) {
      const auto o = attend_incremental<double>(H.row(p), cache.layer(0), w, g, t, p);
      for (std::size_t c = 0; c < g.d_model; ++c) worst = std::max(worst, std::abs(o[c] - full(p, c)));
    }
  }
  detail(std::to_string(geoms.size()) + " geometries (" + std::to_string(decoupled) +
         " with d_qk != d_vo), max |incremental - full| = " + fmt(worst));
  return worst <= 1e-5 && decoupled > 0;
}

bool gradient_integrity() {
  std::mt19937_64 rng(77);
  ModelConfig c;
  c.vocab = 16;
  c.d_model = 16;
  c.n_layers = 1;
  c.geom = {16, 4, 2, 8, 6};
  c.d_ffn = 24;
  c.rope = RopeConfig::frequency_aware(10000, 8);
  c.max_seq = 16;
  auto m = attach_lora(Model<double>::random(c, 7), 2, 4.0, 3);
  for_each_param(m.weights(), [&](const std::string&, Tensor<double>& t, ParamKind k) {
    if (k == ParamKind::attention) t = kvtest::randn(t.rows(), t.cols(), rng, 0.5);
    if (k == ParamKind::lora) t = kvtest::randn(t.rows(), t.cols(), rng, 0.3);
  });
  const auto x0 = kvtest::randn(5, 16, rng);
  const auto probe = kvtest::randn(5, 16, rng);
  using Slot = std::function<Var<double>*(BlockT<Var<double>>&)>;
  const std::vector<std::pair<std::string, Slot>> slots = {
      {"w_q", [](auto& b) { return &b.attn.w_q; }},
      {"w_k", [](auto& b) { return &b.attn.w_k; }},
      {"w_v", [](auto& b) { return &b.attn.w_v; }},
      {"w_o", [](auto& b) { return &b.attn.w_o; }},
      {"attn_norm", [](auto& b) { return &b.attn_norm; }},
      {"lora_up.a", [](auto& b) { return &b.lora_up->a; }},
      {"lora_down.b", [](auto& b) { return &b.lora_down->b; }},
  };
  auto block_out = [&](Var<double> x, const std::string& which, Var<double>* replacement) {
    auto bm = bind(*x.tape, m);
    auto b = bm.vars.blocks[0];
    for (const auto& [name, slot] : slots)
      if (name == which) *slot(b) = *replacement;
    auto out = ops::decoder_block(x, b, c.geom, m.rotary(), lora_scale_of(m));
    return ops::sum(ops::mul(out, x.tape->leaf(probe)));
  };
  double worst = grad_check([&](Var<double> x) { return block_out(x, "", nullptr); }, x0);
  detail("input: max rel err " + fmt(worst));
  const auto& wb = m.weights().blocks[0];
  const std::vector<const Tensor<double>*> values = {&wb.attn.w_q, &wb.attn.w_k, &wb.attn.w_v,
                                                     &wb.attn.w_o, &wb.attn_norm, &wb.lora_up->a,
                                                     &wb.lora_down->b};
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const double e = grad_check(
        [&](Var<double> p) { return block_out(p.tape->leaf(x0), slots[i].first, &p); }, *values[i]);
    detail(slots[i].first + ": max rel err " + fmt(e));
    worst = std::max(worst, e);
  }
  return worst < 1e-4;
}

bool budget_ratios() {
  const HeadGeometry base{4096, 32, 8, 128, 128};
  auto ratio = [&](std::size_t qk, std::size_t vo) {
    const HeadGeometry g{4096, 32, 8, qk, vo};
    return budget_report(g, base, 32, 2, 4000, 0).ratio;
  };
  struct Row {
    std::size_t qk, vo;
    Fraction expect;
    const char* source;
  };
  const Row rows[] = {{64, 64, {1, 2}, "0.50"},
                      {16, 16, {1, 8}, "0.125"},
                      {32, 128, {160, 256}, "160/256"},
                      {16, 128, {144, 256}, "144/256"},
                      {64, 128, {192, 256}, "192/256 (linear model)"}};
  bool ok = true;
  for (const auto& r : rows) {
    const auto f = ratio(r.qk, r.vo);
    detail("(" + std::to_string(r.qk) + "," + std::to_string(r.vo) + ") ratio " + f.str() + " = " +
           fmt(f.value()) + ", expected " + r.source);
    ok &= f == r.expect;
  }
  const bool disagrees = !(ratio(64, 128) == Fraction{172, 256});
  detail(std::string("(64,128) vs the tabulated 172/256: ") +
         (disagrees ? "disagrees; the linear model gives 192/256, so 172 is treated as a misprint"
                    : "agrees"));
  const auto bytes = cache_size(base, 32, 4000, 2);
  detail("(128,128), 32 layers, 8 kv heads, bf16, 4000 tokens: " + std::to_string(bytes) + " bytes");
  return ok && disagrees && bytes == 524288000u;
}

// --- 9-10: recovery training -----------------------------------------------

struct Toy {
  std::vector<Sequence> train;
  std::vector<Sequence> held;
  Model<float> teacher;
  double teacher_ppl = 0.0;
};

TrainConfig toy_train(std::size_t steps, std::uint64_t seed, Stage stage) {
  TrainConfig c;
  c.stage = stage;
  c.lr = 3e-3;
  c.batch = 8;
  c.steps = steps;
  c.adamw.eps = 1e-8;
  c.seed = seed;
  return c;
}

Toy& toy() {
  static Toy t = [] {
    Toy t;
    const auto corpus = TokenCorpus::from_tokens(tokenize_bytes(kvtest::recall_corpus(300000, 5)), 64);
    t.train = corpus.train;
    t.held.assign(corpus.heldout.begin(), corpus.heldout.begin() + 32);
    ModelConfig c;
    c.vocab = 256;
    c.d_model = 128;
    c.n_layers = 4;
    c.geom = {128, 4, 2, 32, 32};
    c.d_ffn = 256;
    c.max_seq = 64;
    c.rope = RopeConfig::standard(10000, 32, RopeLayout::half_split);
    t.teacher = Model<float>::random(c, 1);
    pretrain(t.teacher, t.train, toy_train(800, 0, Stage::pretrain));
    t.teacher_ppl = log_perplexity(t.teacher, t.held);
    return t;
  }();
  return t;
}

Model<float> surgical(std::size_t qk, std::size_t vo, std::uint64_t seed) {
  SurgeryOptions o;
  o.d_qk = qk;
  o.d_vo = vo;
  o.rope = SurgeryRope::frequency_aware;
  o.lora_rank = 8;
  o.lora_alpha = 16;
  o.seed = seed;
  return run_surgery(toy().teacher, o).first;
}

bool monotone_windows(const TrainLog& log, std::string& means) {
  std::vector<double> m;
  for (std::size_t i = 0; i + 10 <= log.size(); i += 10) {
    double s = 0.0;
    for (std::size_t j = i; j < i + 10; ++j) s += log[j].loss;
    m.push_back(s / 10.0);
  }
  bool ok = m.size() >= 2;
  for (std::size_t i = 0; i < m.size(); ++i) {
    means += (i ? " " : "") + fmt(m[i]);
    if (i) ok &= m[i] < m[i - 1];
  }
  return ok;
}

bool two_stage_recovery() {
  Toy& t = toy();
  const double bound = 0.8 * std::log(256.0);
  detail("teacher held-out log PPL " + fmt(t.teacher_ppl) + " (bound " + fmt(bound) + ")");
  auto student = surgical(16, 16, 1);
  const double cut = log_perplexity(student, t.held);
  const double gap = cut - t.teacher_ppl;
  detail("after surgery to (16,16): " + fmt(cut));
  run_stage1(t.teacher, student, t.train, toy_train(150, 1, Stage::one));
  const double s1 = log_perplexity(student, t.held);
  const double r1 = (cut - s1) / gap;
  detail("stage I (150 steps): " + fmt(s1) + ", recovers " + fmt(100 * r1) + "% of the gap");
  bool ok = t.teacher_ppl <= bound && cut > t.teacher_ppl && r1 >= 0.5;
  for (Stage st : {Stage::two_ntp, Stage::two_kl}) {
    auto s = student;
    const auto log = run_stage2(&t.teacher, s, t.train, toy_train(50, 1, st));
    const double p = log_perplexity(s, t.held);
    const double r = (cut - p) / gap;
    std::string means;
    const bool mono = monotone_windows(log, means);
    detail(std::string("stage II ") + (st == Stage::two_kl ? "kl" : "ce") + " (50 steps): " + fmt(p) +
           ", recovers " + fmt(100 * r) + "%, 10-step means " + means + (mono ? " (decreasing)" : " (NOT decreasing)"));
    ok &= r >= 0.5 && mono;
  }
  return ok;
}

bool value_width_direction() {
  Toy& t = toy();
  double sum_wide_vo = 0.0, sum_wide_qk = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    double ppl[2];
    int i = 0;
    for (auto [qk, vo] : {std::pair<std::size_t, std::size_t>{8, 32}, {32, 8}}) {
      auto s = surgical(qk, vo, seed);
      run_stage1(t.teacher, s, t.train, toy_train(150, seed, Stage::one));
      run_stage2(&t.teacher, s, t.train, toy_train(50, seed, Stage::two_ntp));
      ppl[i++] = log_perplexity(s, t.held);
    }
    detail("seed " + std::to_string(seed) + ": (8,32) " + fmt(ppl[0]) + "  (32,8) " + fmt(ppl[1]));
    sum_wide_vo += ppl[0];
    sum_wide_qk += ppl[1];
  }
  detail("mean: (8,32) " + fmt(sum_wide_vo / 3) + "  (32,8) " + fmt(sum_wide_qk / 3));
  return sum_wide_vo <= sum_wide_qk;
}

// --- 11: CLI determinism ---------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

bool cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "kvl_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream(root / "corpus.txt", std::ios::binary) << kvtest::recall_corpus(20000, 9);
  }
  const std::string cli = KVL_CLI;
  struct Cmd {
    std::string name, args;
    std::vector<std::string> outputs;
  };
  // Each run executes inside its own directory with relative outputs ({R} is
  // "."), so both runs see identical command lines. Inputs produced by earlier
  // commands come from the first run.
  const std::vector<Cmd> cmds = {
      {"rope-curve", "rope-curve --dim 64 --mode freq-aware --ideal --max-pos 500 --out {R}/curve.csv --gnuplot {R}/curve.gp",
       {"curve.csv", "curve.gp"}},
      {"budget", "budget --dqk 32 --dvo 64 --mem 1000000000 --csv", {}},
      {"init", "init --d-model 32 --layers 2 --heads 2 --kv-heads 1 --dqk 16 --dvo 16 --d-ffn 48 --max-seq 32 --seed 5 --out {R}/init.ckpt",
       {"init.ckpt"}},
      {"pretrain", "pretrain --model {A}/init.ckpt --corpus {C} --steps 12 --seq-len 32 --seed 2 --out {R}/teacher.ckpt --log {R}/pre.csv --manifest {R}/pre.txt",
       {"teacher.ckpt", "pre.csv", "pre.txt"}},
      {"surgery", "surgery --in {A}/teacher.ckpt --out {R}/student.ckpt --dqk 8 --dvo 4 --selection random --seed 3 --report {R}/report.json",
       {"student.ckpt", "report.json"}},
      {"train-1", "train --stage 1 --teacher {A}/teacher.ckpt --student {A}/student.ckpt --corpus {C} --steps 6 --lr 1e-3 --seq-len 32 --seed 4 --out {R}/s1.ckpt --log {R}/s1.csv",
       {"s1.ckpt", "s1.csv"}},
      {"train-2-ce", "train --stage 2 --loss ce --student {A}/s1.ckpt --corpus {C} --steps 6 --lr 1e-3 --seq-len 32 --seed 4 --out {R}/ce.ckpt --log {R}/ce.csv",
       {"ce.ckpt", "ce.csv"}},
      {"train-2-kl", "train --stage 2 --loss kl --teacher {A}/teacher.ckpt --student {A}/s1.ckpt --corpus {C} --steps 6 --lr 1e-3 --seq-len 32 --seed 4 --out {R}/kl.ckpt --log {R}/kl.csv --manifest {R}/kl.txt",
       {"kl.ckpt", "kl.csv", "kl.txt"}},
      {"eval", "eval --model {A}/kl.ckpt --corpus {C} --seq-len 32 --csv", {}},
  };
  auto expand = [&](std::string s) {
    for (auto [key, val] : {std::pair<std::string, std::string>{"{R}", "."},
                            {"{A}", (root / "a").string()},
                            {"{C}", (root / "corpus.txt").string()}}) {
      for (std::size_t p; (p = s.find(key)) != std::string::npos;) s.replace(p, key.size(), val);
    }
    return s;
  };
  bool ok = true;
  for (const auto& c : cmds) {
    std::string first_stdout;
    bool same = true;
    for (const char* run : {"a", "b"}) {
      const fs::path dir = root / run;
      fs::create_directories(dir);
      const fs::path out = dir / (c.name + ".stdout");
      const std::string line =
          "cd '" + dir.string() + "' && " + cli + " " + expand(c.args) + " > " + out.string() + " 2>&1";
      const int status = std::system(line.c_str());
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        detail(c.name + ": exit status " + std::to_string(WEXITSTATUS(status)));
        same = false;
      }
    }
    same &= slurp(root / "a" / (c.name + ".stdout")) == slurp(root / "b" / (c.name + ".stdout"));
    for (const auto& o : c.outputs) {
      const std::string a = slurp(root / "a" / o), b = slurp(root / "b" / o);
      same &= !a.empty() && a == b;
    }
    detail(c.name + ": " + (same ? "byte-identical" : "DIFFERS") + " across two runs");
    ok &= same;
  }
  return ok;
}

}  // namespace

// Optional arguments select criteria by number.
int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  run_criterion(1, "rotary similarity at distance 0 equals d", zero_point);
  run_criterion(2, "normalised similarity at d=1e5 within 1e-3 of the ideal limit", ideal_limit);
  run_criterion(3, "oscillation: d=16 tail >= 0.5 attenuation, d=256 tail < 0.1 attenuation", instability);
  run_criterion(4, "frequency-aware schedule dominates standard; fewer negatives at d=16", dominance);
  run_criterion(5, "strided selection commutes with rotation, bit-exact", commutation);
  run_criterion(6, "incremental decoding equals full attention within 1e-5 on 20 geometries", cache_equivalence);
  run_criterion(7, "decoder block with rotation and adapters passes finite differences (< 1e-4)", gradient_integrity);
  run_criterion(8, "cache budget ratios", budget_ratios);
  run_criterion(9, "two-stage recovery of a (16,16) student", two_stage_recovery);
  run_criterion(10, "(8,32) recovers at least as well as (32,8) over 3 seeds", value_width_direction);
  run_criterion(11, "CLI commands are byte-reproducible", cli_determinism);
  std::printf("%d of %d criteria failed\n", failures, ran);
  return failures == 0 ? 0 : 1;
}
