#include <fstream>

#include "actnet/checkpoint.hpp"
#include "actnet/config.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace actnet;

TEST_SUITE("config") {
  TEST_CASE("defaults") {
    const TrainConfig c;
    CHECK(c.base_lr == 0.01);
    CHECK(c.momentum == 0.9);
    CHECK(c.t_max == 30000);
    CHECK(c.ema_decay == 0.99);
    CHECK(c.weights.lambda_kd == 0.5);
    CHECK(c.weights.lambda_co == 0.5);
    CHECK(c.weights.temperature == 20.0);
    CHECK(c.batch.labeled == 10);
    CHECK(c.batch.unlabeled == 10);
    CHECK_FALSE(c.ema_warmup);
    CHECK(c.consistency_rampup == 0);
    CHECK(c.eval_every == 200);
    CHECK_NOTHROW(c.validate());
  }

  TEST_CASE("parsing, comments, overrides and errors") {
    TrainConfig c;
    apply_config_text(c, "# comment\nmode = MT\nstudent_spec=4,16  # trailing\n\nt_max=500\nrotate_choices=0,180\n");
    CHECK(c.mode == TrainMode::MT);
    CHECK(c.student_spec.num_encoder_layers == 4);
    CHECK(c.student_spec.initial_channels == 16);
    CHECK(c.t_max == 500);
    CHECK(c.perturbation.rotate_choices == std::vector<int>{0, 180});
    apply_config_text(c, "t_max=7");
    CHECK(c.t_max == 7);
    CHECK_THROWS_AS(apply_config_text(c, "no_such_key=1"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c, "t_max=abc"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c, "t_max"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c, "mode=XYZ"), ConfigError);
    CHECK_THROWS_AS(apply_config_text(c, "ema_warmup=maybe"), ConfigError);
    try {
      apply_config_text(c, "seed=1\nbogus=2", "f.cfg");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("f.cfg:2") != std::string::npos);
    }
    TrainConfig bad;
    bad.ema_decay = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("mode gating table") {
    CHECK_FALSE(uses_kd(TrainMode::FS));
    CHECK_FALSE(uses_co(TrainMode::FS));
    CHECK_FALSE(uses_kd(TrainMode::MT));
    CHECK(uses_co(TrainMode::MT));
    CHECK(uses_kd(TrainMode::KD));
    CHECK_FALSE(uses_co(TrainMode::KD));
    CHECK(uses_kd(TrainMode::ACT));
    CHECK(uses_co(TrainMode::ACT));
  }

  TEST_CASE("canonical text round-trips and the digest tracks every key") {
    TrainConfig c;
    c.seed = 17;
    c.weights.lambda_kd = 0.3;
    TrainConfig d;
    apply_config_text(d, config_text(c));
    CHECK(config_digest(c) == config_digest(d));
    for (const auto& [key, value] : to_key_values(c)) {
      TrainConfig e = c;
      const std::string alt = key == "mode" ? "FS" : key == "student_spec" || key == "teacher_spec" ? "2,3"
                              : value == "true" ? "false" : value == "false" ? "true"
                              : key == "rotate_choices" ? "90" : "3";
      apply_setting(e, key, alt);
      CAPTURE(key);
      CHECK(config_digest(e) != config_digest(c));
    }
  }

  TEST_CASE("load_config from file") {
    testutil::TempDir d("cfg");
    {
      std::ofstream out(d.path() / "a.cfg");
      out << "t_max=123\nlambda_co=0.25\n";
    }
    const auto c = load_config(d.path() / "a.cfg");
    CHECK(c.t_max == 123);
    CHECK(c.weights.lambda_co == 0.25);
    CHECK_THROWS_AS(load_config(d.path() / "missing.cfg"), ConfigError);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("save/load round trip and corruption detection") {
    testutil::TempDir d("ckpt");
    UNet m({2, 3}, 4);
    Checkpoint c;
    c.config_text = "seed=1\n";
    c.config_digest = "0123";
    c.iteration = 42;
    c.student = capture(m);
    for (const auto& p : m.parameters()) c.velocity.emplace_back(p.value.shape(), 0.5f);
    c.has_ema = true;
    c.ema_decay = 0.99;
    c.ema_steps = 41;
    for (const auto& p : m.parameters()) c.ema_shadow.push_back(tensor_cast<double>(p.value));
    c.ema_buffers = c.student.buffers;
    c.has_best = true;
    c.best_iteration = 40;
    c.best_val_dsc = 0.75;
    c.best = capture(UNet({2, 3}, 5));
    const auto path = d.path() / "x.ckpt";
    save_checkpoint(path, c);
    CHECK_FALSE(std::filesystem::exists(d.path() / "x.ckpt.tmp"));
    const Checkpoint r = load_checkpoint(path);
    CHECK(r.iteration == 42);
    CHECK(r.config_text == c.config_text);
    CHECK(r.config_digest == c.config_digest);
    CHECK(r.student.spec == c.student.spec);
    CHECK(r.velocity == c.velocity);
    CHECK(r.ema_shadow == c.ema_shadow);
    CHECK(r.ema_steps == 41);
    CHECK(r.best_val_dsc == 0.75);
    CHECK(parameter_checksum(make_model(r.selected())) == parameter_checksum(UNet({2, 3}, 5)));
    CHECK(parameter_checksum(make_model(r.student)) == parameter_checksum(m));

    std::string bytes;
    {
      std::ifstream in(path, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    auto write = [&](const std::string& b) {
      std::ofstream out(d.path() / "bad.ckpt", std::ios::binary);
      out << b;
    };
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    write(flipped);
    CHECK_THROWS_AS(load_checkpoint(d.path() / "bad.ckpt"), DataError);
    write(bytes.substr(0, bytes.size() - 20));
    CHECK_THROWS_AS(load_checkpoint(d.path() / "bad.ckpt"), DataError);
    write("not a checkpoint at all");
    CHECK_THROWS_AS(load_checkpoint(d.path() / "bad.ckpt"), DataError);
    CHECK_THROWS_AS(load_checkpoint(d.path() / "missing.ckpt"), DataError);
  }

  TEST_CASE("loading weights into a different architecture fails") {
    const ModelState s = capture(UNet({2, 3}, 1));
    UNet other({2, 4}, 1);
    CHECK_THROWS_AS(load_into(other, s), ShapeError);
  }
}
