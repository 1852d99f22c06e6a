#include "m2dclap/evaluate.hpp"
#include "m2dclap/pretrain.hpp"
#include "m2dclap/report.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace m2dclap;
namespace fs = std::filesystem;

TEST(Config, SerializeRoundTripExact) {
  RunConfig c = RunConfig::desk();
  c.optimizer.lr = 0.1 + 0.2;
  c.probe_seeds = {5, 6, 7, 8};
  c.train_manifest = "/data/train.tsv";
  c.pooling = linear::Pooling::MeanAll;
  const RunConfig r = RunConfig::parse(c.serialize(true));
  EXPECT_EQ(r.serialize(), c.serialize());
  EXPECT_EQ(r.hash(), c.hash());
  EXPECT_EQ(r.optimizer.lr, 0.1 + 0.2);
  const RunConfig f = RunConfig::parse(RunConfig::full_scale().serialize());
  EXPECT_EQ(f.model.encoder.dim, 768);
  EXPECT_EQ(f.serialize(), RunConfig::full_scale().serialize());
}

TEST(Config, OverridesAndErrors) {
  RunConfig c = RunConfig::desk();
  const uint64_t h = c.hash();
  c.apply_overrides({"pretrain.lr=0.01", "model.depth = 2", "linear.seeds=1,2,3", "data.toy_embed_fallback=true"});
  EXPECT_EQ(c.optimizer.lr, 0.01);
  EXPECT_EQ(c.model.encoder.depth, 2);
  EXPECT_TRUE(c.toy_embed_fallback);
  EXPECT_NE(c.hash(), h);
  EXPECT_EQ(c.get("model.depth"), "2");
  EXPECT_THROW(c.apply_overrides({"model.nope=1"}), Error);
  EXPECT_THROW(c.apply_overrides({"pretrain.lr"}), Error);
  EXPECT_THROW(c.apply_overrides({"pretrain.lr=abc"}), Error);
  EXPECT_THROW(c.apply_overrides({"model.depth=1.5"}), Error);
  RunConfig bad = RunConfig::desk();
  bad.mask_ratio = 1.0;
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_THROW(RunConfig::parse("no equals sign here\n"), Error);
  for (const auto& k : RunConfig::keys()) EXPECT_NO_THROW(RunConfig::desk().get(k)) << k;
}

TEST(Config, LoadResolvesRelativePaths) {
  const auto dir = testutil::temp_dir("cfgload");
  std::ofstream(dir / "a.conf") << "# comment\ndata.train_manifest = sub/train.tsv\npretrain.epochs = 3\n";
  const RunConfig c = RunConfig::load(dir / "a.conf");
  EXPECT_EQ(fs::path(c.train_manifest), dir / "sub/train.tsv");
  EXPECT_EQ(c.epochs, 3);
  EXPECT_EQ(c.batch_size, RunConfig::desk().batch_size);
}

TEST(Manifest, RoundTripAndFallbackCaption) {
  const auto dir = testutil::temp_dir("manifest");
  std::ofstream(dir / "m.tsv") << "a\twav/a.wav\tdog\n"
                               << "b\t/abs/b.wav\tdog;rain\tfirst caption|second caption\tid1;id2\n";
  const auto recs = data::load_manifest(dir / "m.tsv");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].wav, dir / "wav/a.wav");
  EXPECT_EQ(recs[0].captions, std::vector<std::string>{"The sound of dog"});
  EXPECT_EQ(recs[0].caption_ids, std::vector<std::string>{text::caption_id("The sound of dog")});
  EXPECT_EQ(recs[1].labels, (std::vector<std::string>{"dog", "rain"}));
  EXPECT_EQ(recs[1].caption_ids, (std::vector<std::string>{"id1", "id2"}));
  data::save_manifest(dir / "copy.tsv", recs);
  const auto again = data::load_manifest(dir / "copy.tsv");
  EXPECT_EQ(again[0].wav, recs[0].wav);
  EXPECT_EQ(again[1].captions, recs[1].captions);
  EXPECT_EQ(data::class_names({recs}), (std::vector<std::string>{"dog", "rain"}));
  std::ofstream(dir / "dup.tsv") << "a\tx.wav\tdog\na\ty.wav\tcat\n";
  EXPECT_THROW(data::load_manifest(dir / "dup.tsv"), FormatError);
  std::ofstream(dir / "short.tsv") << "a\tx.wav\n";
  EXPECT_THROW(data::load_manifest(dir / "short.tsv"), FormatError);
}

TEST(Dataset, ResolveCaptions) {
  data::ManifestRecord r{"a", "a.wav", {"dog"}, {"The sound of dog"}, {"cid"}};
  text::EmbeddingTable table(8);
  EXPECT_THROW(data::resolve_captions({r}, table, false, 8), Error);
  const auto t = data::resolve_captions({r}, table, true, 8);
  // Stored as float32, as on disk.
  EXPECT_EQ(t.get("cid"), text::toy_embed("The sound of dog", 8).cast<float>().cast<double>());
  table.put("cid", RowVector(RowVector::Ones(8)));
  EXPECT_EQ(data::resolve_captions({r}, table, true, 8).get("cid"), RowVector(RowVector::Ones(8)));
}

// Small corpus and model shared by the trainer tests.
class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(testutil::temp_dir("trainer"));
    data::SyntheticSpec spec;
    spec.classes = 2;
    spec.clips_per_class = 6;
    spec.test_per_class = 2;
    spec.duration_s = 1.0;
    spec.dim = 16;
    layout_ = new data::SyntheticLayout(data::write_synthetic(*dir_, spec));
    const auto recs = data::load_manifest(layout_->train_manifest);
    clips_ = new data::ClipSet(data::load_clips(layout_->train_manifest, data::class_names({recs})));
    table_ = new text::EmbeddingTable(data::resolve_captions(clips_->records, text::load_table(layout_->embedding_table, 16),
                                                             false, 16));
  }
  static void TearDownTestSuite() {
    delete table_;
    delete clips_;
    delete layout_;
    fs::remove_all(*dir_);
    delete dir_;
  }

  static RunConfig config() {
    RunConfig c = RunConfig::desk();
    c.model.encoder.depth = 1;
    c.model.encoder.dim = 16;
    c.model.encoder.heads = 2;
    c.model.predictor_depth = 1;
    c.model.predictor_dim = 16;
    c.model.predictor_heads = 2;
    c.model.projector_hidden = 16;
    c.model.semantic_dim = 16;
    c.crop_seconds = 0.5;
    c.batch_size = 4;
    c.epochs = 3;
    c.optimizer.warmup_epochs = 1.0;
    c.ema = {0.9, 0.99, 4};
    c.threads = 1;
    return c;
  }

  static inline fs::path* dir_ = nullptr;
  static inline data::SyntheticLayout* layout_ = nullptr;
  static inline data::ClipSet* clips_ = nullptr;
  static inline text::EmbeddingTable* table_ = nullptr;
};

TEST_F(TrainerTest, SyntheticCorpusLayout) {
  // clips_per_class counts train and test clips together.
  EXPECT_EQ(clips_->size(), 8u);
  EXPECT_EQ(clips_->class_names, (std::vector<std::string>{"tone class 0", "tone class 1"}));
  EXPECT_EQ(clips_->waves[0].samples.size(), 16000u);
  EXPECT_EQ(clips_->records[0].captions[0], "The sound of tone class 0");
  const auto table = text::load_table(layout_->embedding_table);
  EXPECT_TRUE(table.contains(text::caption_id("tone class 1 can be heard")));
  EXPECT_EQ(data::load_manifest(layout_->test_manifest).size(), 4u);
}

TEST_F(TrainerTest, BatchesArePureFunctionsOfStep) {
  train::Pretrainer a(config(), *clips_, *table_);
  train::Pretrainer b(config(), *clips_, *table_);
  EXPECT_EQ(a.steps_per_epoch(), 2);
  EXPECT_EQ(a.total_steps(), 6);
  for (long s : {0L, 4L, 8L}) {
    const auto ba = a.make_batch(s), bb = b.make_batch(s);
    EXPECT_EQ(a.batch_ids(s), b.batch_ids(s));
    for (size_t i = 0; i < ba.samples.size(); ++i) {
      EXPECT_EQ(ba.samples[i].tokens, bb.samples[i].tokens);
      EXPECT_EQ(ba.samples[i].mask.masked_idx, bb.samples[i].mask.masked_idx);
    }
  }
  EXPECT_EQ(a.make_batch(0).pe.grid, train::crop_grid(config()));
}

TEST_F(TrainerTest, DeterministicLossCurve) {
  train::Pretrainer a(config(), *clips_, *table_);
  train::Pretrainer b(config(), *clips_, *table_);
  while (!a.done()) {
    const auto la = a.step(), lb = b.step();
    ASSERT_EQ(la.loss.total, lb.loss.total) << "step " << la.step;
    ASSERT_EQ(la.lr, lb.lr);
  }
  EXPECT_EQ(a.online().max_abs_diff(b.online()), 0.0);
  EXPECT_EQ(a.target().max_abs_diff(b.target()), 0.0);
}

TEST_F(TrainerTest, ThreadCountDoesNotChangeTraining) {
  RunConfig c3 = config();
  c3.threads = 3;
  train::Pretrainer a(config(), *clips_, *table_);
  train::Pretrainer b(c3, *clips_, *table_);
  for (int i = 0; i < 4; ++i) ASSERT_EQ(a.step().loss.total, b.step().loss.total);
  EXPECT_EQ(a.online().max_abs_diff(b.online()), 0.0);
}

TEST_F(TrainerTest, CheckpointResumeBitExact) {
  const auto path = *dir_ / "mid.m2dk";
  train::Pretrainer full(config(), *clips_, *table_);
  std::vector<double> curve;
  while (!full.done()) curve.push_back(full.step().loss.total);

  train::Pretrainer first(config(), *clips_, *table_);
  for (int i = 0; i < 4; ++i) first.step();
  train::save_checkpoint(path, first.checkpoint());
  const auto ck = train::load_checkpoint(path);
  EXPECT_EQ(ck.step, 4);
  EXPECT_EQ(ck.config.serialize(), config().serialize());
  train::Pretrainer resumed(ck, *clips_, *table_);
  for (size_t i = 4; i < curve.size(); ++i) ASSERT_EQ(resumed.step().loss.total, curve[i]) << "step " << i;
  EXPECT_EQ(resumed.online().max_abs_diff(full.online()), 0.0);
  EXPECT_EQ(resumed.target().max_abs_diff(full.target()), 0.0);
}

TEST_F(TrainerTest, CheckpointLayoutValidated) {
  train::Pretrainer t(config(), *clips_, *table_);
  auto ck = t.checkpoint();
  ck.online = ParamStore{};
  ck.online.add("encoder.bogus", 1, 1);
  train::save_checkpoint(*dir_ / "bad.m2dk", ck);
  EXPECT_THROW(train::load_checkpoint(*dir_ / "bad.m2dk"), FormatError);
}

TEST_F(TrainerTest, LambdaZeroBranches) {
  for (clap::LossWeights w : {clap::LossWeights{1.0, 0.0}, clap::LossWeights{0.0, 1.0}}) {
    RunConfig c = config();
    c.weights = w;
    train::Pretrainer t(c, *clips_, *table_);
    const ParamStore before = t.online();
    for (int i = 0; i < 3; ++i) ASSERT_TRUE(std::isfinite(t.step().loss.total));
    const std::string frozen = w.clap == 0.0 ? "projector." : "predictor.";
    EXPECT_EQ(t.online().subset(frozen).max_abs_diff(before.subset(frozen)), 0.0);
    EXPECT_GT(t.online().subset("encoder.").max_abs_diff(before.subset("encoder.")), 0.0);
  }
}

TEST_F(TrainerTest, InitialM2dLossNearTwo) {
  // Random prediction vs target directions: E[2 - 2 cos] = 2. Desk model on
  // full-length crops.
  RunConfig c = RunConfig::desk();
  c.crop_seconds = 1.0;
  c.batch_size = 8;
  c.threads = 1;
  const auto table = data::resolve_captions(clips_->records, text::EmbeddingTable(128), true, 128);
  train::Pretrainer t(c, *clips_, table);
  EXPECT_NEAR(t.step().loss.m2d, 2.0, 0.3);
}

TEST_F(TrainerTest, TemperatureStaysClamped) {
  RunConfig c = config();
  c.model.init_temperature = 0.011;
  c.optimizer.lr = 0.05;
  c.weights = {0.0, 1.0};
  train::Pretrainer t(c, *clips_, *table_);
  while (!t.done()) ASSERT_GE(t.step().loss.tau, clap::kMinTemperature);
  EXPECT_GE(temperature(t.online()), clap::kMinTemperature - 1e-15);
}

TEST_F(TrainerTest, LossLogFormat) {
  train::Pretrainer t(config(), *clips_, *table_);
  const auto row = train::loss_log_row(t.step());
  EXPECT_EQ(train::loss_log_header(), "step,epoch,lr,ema_decay,loss,loss_m2d,loss_clap,tau");
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 7);
  EXPECT_EQ(row.rfind("1,", 0), 0u);
}

TEST_F(TrainerTest, EvaluationProtocolsRun) {
  RunConfig c = config();
  c.test_manifest = layout_->test_manifest.string();
  train::Pretrainer t(c, *clips_, *table_);
  while (!t.done()) t.step();
  const auto ck = t.checkpoint();
  const auto classes = clips_->class_names;
  const auto test = data::load_clips(layout_->test_manifest, classes);
  const auto table = text::load_table(layout_->embedding_table, 16);

  const auto zs = eval::run_zeroshot(ck, test, zeroshot::CaptionRuleSet::defaults(), &table, "synthetic", 1);
  EXPECT_EQ(zs.protocol, "zeroshot");
  EXPECT_EQ(zs.metric, "accuracy");
  EXPECT_GE(zs.value, 0.0);
  EXPECT_LE(zs.value, 1.0);
  EXPECT_EQ(zs.config_hash, eval::hex_hash(c.hash()));
  EXPECT_THROW(eval::class_prompt_embeddings(classes, "synthetic", zeroshot::CaptionRuleSet::defaults(), nullptr,
                                             false, 16),
               Error);

  const auto lin = eval::run_linear(ck, *clips_, test, "synthetic", 1);
  EXPECT_EQ(lin.report.protocol, "linear");
  EXPECT_GE(lin.report.ci95, 0.0);
  EXPECT_EQ(lin.train_features.features.rows(), 8);
  EXPECT_EQ(lin.test_features.features.cols(), 16 * (80 / 16));

  auto profile = augment::finetune_profile("esc50");
  profile.epochs = 2;
  profile.batch_size = 4;
  profile.lr = 0.01;
  profile.warmup_epochs = 1;
  const auto ft = eval::run_finetune(ck, *clips_, test, profile, "synthetic", 1, 1);
  EXPECT_EQ(ft.report.protocol, "finetune");
  EXPECT_EQ(ft.report.curve.size(), 2u);
  EXPECT_TRUE(ft.patch_embed_frozen);
  EXPECT_EQ(ft.max_patch_embed_change, 0.0);
  profile.freeze_patch_embed = false;
  EXPECT_GT(eval::run_finetune(ck, *clips_, test, profile, "synthetic", 1, 1).max_patch_embed_change, 0.0);
}

TEST(ResolveProfile, Overrides) {
  RunConfig c = RunConfig::desk();
  c.finetune_profile = "esc50";
  EXPECT_EQ(eval::resolve_profile(c).lr, 0.5);
  c.finetune_lr = 0.1;
  c.finetune_batch_size = 32;
  c.finetune_epochs = 15;
  c.finetune_warmup_epochs = 1;
  c.finetune_optimizer = "adamw";
  const auto p = eval::resolve_profile(c);
  EXPECT_EQ(p.lr, 0.1);
  EXPECT_EQ(p.batch_size, 32);
  EXPECT_EQ(p.epochs, 15);
  EXPECT_EQ(p.warmup_epochs, 1);
  EXPECT_EQ(p.optimizer, "adamw");
  EXPECT_TRUE(p.freeze_patch_embed);
}

TEST(Report, JsonRoundTrip) {
  const auto dir = testutil::temp_dir("report");
  eval::EvalReport r;
  r.task = "synthetic";
  r.protocol = "linear";
  r.metric = "accuracy";
  r.value = 0.975;
  r.ci95 = 0.0125;
  r.config_hash = eval::hex_hash(0xabcdefULL);
  r.timestamp = eval::utc_timestamp();
  r.extra["train_accuracy"] = 1.0;
  r.curve = {1.0, 0.5};
  eval::save_report(dir / "r.json", r);
  const auto b = eval::load_report(dir / "r.json");
  EXPECT_EQ(b.task, r.task);
  EXPECT_EQ(b.value, r.value);
  EXPECT_EQ(b.ci95, r.ci95);
  EXPECT_EQ(b.extra, r.extra);
  EXPECT_EQ(b.curve, r.curve);
  EXPECT_EQ(b.config_hash, "0000000000abcdef");
  EXPECT_EQ(r.timestamp.size(), 20u);
  EXPECT_EQ(r.timestamp.back(), 'Z');
  EXPECT_THROW(eval::EvalReport::from_json("{"), Error);
}

TEST(Report, TableAndPlot) {
  const auto dir = testutil::temp_dir("plot");
  eval::EvalReport a;
  a.task = "synthetic";
  a.protocol = "zeroshot";
  a.metric = "accuracy";
  a.value = 0.9;
  eval::EvalReport b = a;
  b.protocol = "linear";
  b.ci95 = 0.01;
  const std::string table = report::render_table({a, b});
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
  EXPECT_NE(table.find("zeroshot"), std::string::npos);
  EXPECT_NE(table.find(" - "), std::string::npos);

  std::ofstream(dir / "loss.csv") << "step,epoch,lr,ema_decay,loss,loss_m2d,loss_clap,tau\n1,0.1,0.1,0.99,2.5,2,50,0.07\n"
                                  << "2,0.2,0.1,0.99,2.0,1.5,50,0.07\n";
  EXPECT_EQ(report::read_loss_curve(dir / "loss.csv"), (std::vector<double>{2.5, 2.0}));
  const auto img = report::render_plot({2.5, 2.0}, {a, b});
  EXPECT_EQ(img.width, 640);
  report::write_png(dir / "p.png", img);
  std::ifstream in(dir / "p.png", std::ios::binary);
  char sig[8] = {};
  in.read(sig, 8);
  EXPECT_EQ(std::string(sig + 1, 3), "PNG");
}
