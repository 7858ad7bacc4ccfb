#include <doctest.h>

#include <set>

#include "more/config.hpp"
#include "more/errors.hpp"

using namespace more;

TEST_CASE("run config round trip") {
  const RunConfig defaults;
  CHECK(RunConfig::parse(defaults.serialize()).serialize() == defaults.serialize());
  CHECK(RunConfig::parse(describe_config_schema()).serialize() == defaults.serialize());
  CHECK(RunConfig::parse("").serialize() == defaults.serialize());

  RunConfig c;
  c.train.lr = 0.1;
  c.train.weight_decay = 1e-7;
  c.model.tau_init = 1.0 / 3.0;
  c.data.manifest = "data/m.tsv";
  c.data.prepared = true;
  c.finetune.mode = FinetuneMode::last_k_qkv;
  c.finetune.labels = LabelMode::multiclass;
  const RunConfig back = RunConfig::parse(c.serialize());
  CHECK(back.serialize() == c.serialize());
  CHECK(back.train.lr == 0.1);
  CHECK(back.model.tau_init == 1.0 / 3.0);
  CHECK(back.data.manifest == "data/m.tsv");
  CHECK(back.finetune.mode == FinetuneMode::last_k_qkv);
}

TEST_CASE("schema keys are unique and round-trip individually") {
  RunConfig c;
  std::set<std::string> names;
  for (auto& f : config_fields(c)) {
    CHECK(names.insert(f.section + "." + f.key).second);
    CHECK_FALSE(f.doc.empty());
    const std::string v = f.get();
    f.set(v);
    CHECK(f.get() == v);
  }
  CHECK(names.contains("train.lr"));
  CHECK(names.contains("model.image.depth"));
  CHECK(names.contains("train.finetune.mode"));
}

TEST_CASE("run config parsing tolerates comments and spacing") {
  const RunConfig c = RunConfig::parse("# comment\n\n[train]\n  lr=0.002  \n# another\n[model]\nimage.depth = 3\n");
  CHECK(c.train.lr == 0.002);
  CHECK(c.model.image.depth == 3);
}

TEST_CASE("run config errors") {
  for (const char* bad : {"[nope]\n", "[train]\nnope = 1\n", "[train]\nlr = 1\nlr = 2\n", "lr = 1\n",
                          "[train]\nlr = fast\n", "[train]\nlr = 1e-3x\n", "[data]\nprepared = yes\n",
                          "[train]\nfinetune.mode = all\n", "[train]\nbatch_size = 0\n", "[eval]\nfusion_weight = 2\n",
                          "[data]\ntest_fraction = 1\n", "[train\n", "[train]\njust words\n"})
    CHECK_THROWS_AS(RunConfig::parse(bad), SchemaError);
  try {
    RunConfig::parse("[train]\n\nbogus = 1\n");
    FAIL("expected a schema error");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.cfg"), MissingFileError);
}
