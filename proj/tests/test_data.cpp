#include "knotcast/data.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "tmpdir.hpp"

using namespace knotcast;

namespace {

// Brute-force linear interpolation: scan every raw interval for each query.
double lerp_oracle(const Vec& t, const Vec& y, double q) {
  if (q <= t(0)) return y(0);
  const Eigen::Index n = t.size();
  if (q >= t(n - 1)) return y(n - 1);
  for (Eigen::Index k = 0; k + 1 < n; ++k) {
    if (q >= t(k) && q <= t(k + 1)) {
      return y(k) + (y(k + 1) - y(k)) * (q - t(k)) / (t(k + 1) - t(k));
    }
  }
  return y(n - 1);
}

CycleRecord record_from(const std::string& id, int cycle, std::vector<double> t,
                        std::vector<double> v, std::vector<double> i) {
  CycleRecord rec;
  rec.cell_id = id;
  rec.cycle_index = cycle;
  rec.t = Eigen::Map<Vec>(t.data(), static_cast<Eigen::Index>(t.size()));
  rec.v = Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  rec.i = Eigen::Map<Vec>(i.data(), static_cast<Eigen::Index>(i.size()));
  return rec;
}

CycleRecord random_record(Rng& rng, int samples, int cycle = 1) {
  std::vector<double> t(samples), v(samples), i(samples);
  t[0] = rng.uniform(0.0, 5.0);
  for (int k = 1; k < samples; ++k) t[k] = t[k - 1] + rng.uniform(0.01, 2.0);
  for (int k = 0; k < samples; ++k) {
    v[k] = rng.uniform(2.0, 3.6);
    i[k] = rng.uniform(-4.4, 1.1);
  }
  return record_from("rand", cycle, t, v, i);
}

}  // namespace

TEST_CASE("resample is the identity on an already-uniform grid") {
  const auto rec = record_from("a", 1, {0, 1, 2, 3}, {4, 3, 2, 1}, {1, 1, 1, 1});
  const auto m = resample(rec, 4);
  Mat want(3, 4);
  want << 4, 3, 2, 1, 1, 1, 1, 1, 0, 1, 2, 3;
  CHECK((m.x - want).cwiseAbs().maxCoeff() == 0.0);
  CHECK(m.source_cycles == std::vector<int>{1});
}

TEST_CASE("resample hits linear midpoints") {
  const auto rec = record_from("a", 1, {0, 2}, {3.0, 3.6}, {1.0, 0.0});
  const auto m = resample(rec, 3);
  CHECK(m.x(0, 0) == 3.0);
  CHECK(m.x(0, 1) == doctest::Approx(3.3).epsilon(1e-15));
  CHECK(m.x(0, 2) == 3.6);
  CHECK(m.x(2, 1) == doctest::Approx(1.0));
}

TEST_CASE("resample matches a brute-force interpolation oracle") {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const auto rec = random_record(rng, static_cast<int>(rng.uniform_int(5, 60)));
    const auto m = resample(rec, 128);
    for (int k = 0; k < 128; ++k) {
      const double tq = m.x(2, k);
      CHECK(m.x(0, k) == doctest::Approx(lerp_oracle(rec.t, rec.v, tq)).epsilon(1e-12));
      CHECK(m.x(1, k) == doctest::Approx(lerp_oracle(rec.t, rec.i, tq)).epsilon(1e-12));
    }
    // the time row is an exact uniform grid with preserved endpoints
    CHECK(m.x(2, 0) == rec.t(0));
    CHECK(m.x(2, 127) == rec.t(rec.t.size() - 1));
    CHECK(m.x(0, 0) == rec.v(0));
    CHECK(m.x(0, 127) == rec.v(rec.v.size() - 1));
  }
}

TEST_CASE("resample commutes with affine transforms of the signal") {
  Rng rng(7);
  const auto rec = random_record(rng, 40);
  CycleRecord scaled = rec;
  const double a = -2.5, b = 0.75;
  scaled.v = a * rec.v.array() + b;
  const auto m0 = resample(rec, 64);
  const auto m1 = resample(scaled, 64);
  for (int k = 0; k < 64; ++k) {
    CHECK(m1.x(0, k) == doctest::Approx(a * m0.x(0, k) + b).epsilon(1e-12));
  }
}

TEST_CASE("resample rejects bad records") {
  auto rec = record_from("a", 1, {0, 1, 1}, {1, 2, 3}, {0, 0, 0});
  CHECK_THROWS_WITH_AS((void)resample(rec, 8), doctest::Contains("not strictly increasing"),
                       Error);
  rec = record_from("a", 1, {0}, {1}, {0});
  CHECK_THROWS_AS((void)resample(rec, 8), Error);
  rec = record_from("a", 1, {0, 1}, {1, 2}, {0, 0});
  CHECK_THROWS_AS((void)resample(rec, 1), Error);
}

TEST_CASE("stack_cycles concatenates along the length axis") {
  Rng rng(3);
  std::vector<CycleRecord> recs;
  for (int c = 1; c <= 3; ++c) {
    auto rec = random_record(rng, 30, c);
    rec.cell_id = "cellA";
    recs.push_back(rec);
  }
  const auto one = stack_cycles({recs[0]}, 128);
  CHECK(one.x.rows() == 3);
  CHECK(one.x.cols() == 128);

  const auto three = stack_cycles(recs, 128);
  CHECK(three.x.rows() == 3);
  CHECK(three.x.cols() == 384);
  CHECK(three.source_cycles == std::vector<int>{1, 2, 3});
  CHECK((three.x.middleCols(0, 128) - resample(recs[0], 128).x).cwiseAbs().maxCoeff() == 0.0);
  CHECK((three.x.middleCols(256, 128) - resample(recs[2], 128).x).cwiseAbs().maxCoeff() == 0.0);

  recs[1].cell_id = "cellB";
  CHECK_THROWS_WITH_AS((void)stack_cycles(recs, 128), doctest::Contains("mixed cell ids"), Error);
  recs[1].cell_id = "cellA";
  recs[1].cycle_index = 5;
  CHECK_THROWS_WITH_AS((void)stack_cycles(recs, 128), doctest::Contains("contiguous"), Error);
  CHECK_THROWS_AS((void)stack_cycles({}, 128), Error);
}

TEST_CASE("perturb with sigma=0 is the identity and fixed seeds repeat") {
  Rng rng(11);
  const auto m = resample(random_record(rng, 50), 128);
  const auto same = perturb(m, 0.0, 123);
  CHECK((same.x - m.x).cwiseAbs().maxCoeff() == 0.0);

  const auto a = perturb(m, 0.01, 99);
  const auto b = perturb(m, 0.01, 99);
  CHECK((a.x - b.x).cwiseAbs().maxCoeff() == 0.0);
  const auto c = perturb(m, 0.01, 100);
  CHECK((a.x - c.x).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("perturb noise variance tracks sigma^2 * Var(row)") {
  Rng rng(5);
  const auto m = resample(random_record(rng, 80), 128);
  const double sigma = 0.01;
  const int draws = 1000;
  Vec acc = Vec::Zero(3);
  for (int d = 0; d < draws; ++d) {
    const auto p = perturb(m, sigma, 1000 + static_cast<std::uint64_t>(d));
    for (int r = 0; r < 3; ++r) {
      acc(r) += variance_of((p.x.row(r) - m.x.row(r)).transpose());
    }
  }
  for (int r = 0; r < 3; ++r) {
    const double want = sigma * sigma * variance_of(m.x.row(r).transpose());
    const double got = acc(r) / draws;
    CHECK(got == doctest::Approx(want).epsilon(0.2));
  }
}

TEST_CASE("synthetic knee cell carries its labels exactly") {
  SynthConfig cfg;
  cfg.kept_cycles = 3;
  CellLatents lat;
  lat.pattern = Pattern::kKnee;
  lat.initial_soh = 0.985;
  lat.eol_cycle = 520;
  lat.knee_cycle = 400.0;
  const auto cell = synth_cell(cfg, lat, "knee01", Rng(77));

  REQUIRE(cell.series.size() >= 520);
  CHECK(cell.series.soh(0) >= 0.97);
  int first_below = 0;
  for (Eigen::Index k = 0; k < cell.series.size(); ++k) {
    if (k > 0) CHECK(cell.series.soh(k) < cell.series.soh(k - 1));
    if (first_below == 0 && cell.series.soh(k) < 0.80) {
      first_below = cell.series.cycles[static_cast<std::size_t>(k)];
    }
  }
  CHECK(first_below == 520);
  CHECK(cell.truth->knee_cycle == 400.0);
  CHECK(cell.cycles.size() == 3);
  for (const auto& rec : cell.cycles) validate(rec);
}

TEST_CASE("linear cell with zero noise is exactly affine until the end") {
  SynthConfig cfg;
  cfg.kept_cycles = 1;
  cfg.capacity_noise = 0.0;
  CellLatents lat;
  lat.pattern = Pattern::kLinear;
  lat.initial_soh = 0.98;
  lat.eol_cycle = 700;
  const auto cell = synth_cell(cfg, lat, "lin01", Rng(1));
  const double slope = cell.series.soh(1) - cell.series.soh(0);
  for (Eigen::Index k = 1; k < cell.series.size(); ++k) {
    CHECK(cell.series.soh(k) - cell.series.soh(k - 1) == doctest::Approx(slope).epsilon(1e-9));
  }
}

TEST_CASE("fleet generation is deterministic and respects the SOH invariants") {
  SynthConfig cfg;
  cfg.cells = 24;
  cfg.kept_cycles = 2;
  const auto fleet_a = synth_fleet(cfg, 2024);
  const auto fleet_b = synth_fleet(cfg, 2024);
  REQUIRE(fleet_a.size() == 24);

  for (std::size_t c = 0; c < fleet_a.size(); ++c) {
    CHECK(fleet_a[c].series.cell_id == fleet_b[c].series.cell_id);
    CHECK((fleet_a[c].series.capacity_ah - fleet_b[c].series.capacity_ah).cwiseAbs().maxCoeff() ==
          0.0);
    REQUIRE(fleet_a[c].cycles.size() == fleet_b[c].cycles.size());
    for (std::size_t j = 0; j < fleet_a[c].cycles.size(); ++j) {
      CHECK((fleet_a[c].cycles[j].v - fleet_b[c].cycles[j].v).cwiseAbs().maxCoeff() == 0.0);
    }

    // strictly decreasing SOH crossing 80% exactly once
    const auto& s = fleet_a[c].series;
    int crossings = 0;
    for (Eigen::Index k = 1; k < s.size(); ++k) {
      CHECK(s.soh(k) < s.soh(k - 1));
      if (s.soh(k - 1) >= 0.80 && s.soh(k) < 0.80) ++crossings;
    }
    CHECK(crossings == 1);
    CHECK(s.soh(0) >= 0.97);
    CHECK(fleet_a[c].truth->eol_cycle ==
          s.cycles[static_cast<std::size_t>(
              std::distance(s.capacity_ah.data(),
                            std::find_if(s.capacity_ah.data(), s.capacity_ah.data() + s.size(),
                                         [&](double cap) { return cap / s.nominal_capacity_ah <
                                                                  0.80; })))]);
  }

  const auto fleet_c = synth_fleet(cfg, 2025);
  CHECK((fleet_c[0].series.capacity_ah - fleet_a[0].series.capacity_ah).cwiseAbs().maxCoeff() >
        0.0);
}

TEST_CASE("synth_fleet rejects invalid pattern mixes") {
  SynthConfig cfg;
  cfg.weight_knee = -1.0;
  CHECK_THROWS_WITH_AS((void)synth_fleet(cfg, 1), doctest::Contains("weights"), Error);
  cfg.weight_knee = 0.0;
  cfg.weight_linear = 0.0;
  cfg.weight_sublinear = 0.0;
  CHECK_THROWS_AS((void)synth_fleet(cfg, 1), Error);
}

TEST_CASE("dataset round-trips through the CSV schema") {
  SynthConfig cfg;
  cfg.cells = 4;
  cfg.kept_cycles = 2;
  cfg.eol_min = 300;
  cfg.eol_max = 500;
  const auto fleet = synth_fleet(cfg, 9);

  TmpDir dir("roundtrip");
  save_dataset(fleet, dir.str());
  const auto loaded = load_dataset(dir.str());
  REQUIRE(loaded.size() == fleet.size());
  for (std::size_t c = 0; c < fleet.size(); ++c) {
    CHECK(loaded[c].series.cell_id == fleet[c].series.cell_id);
    CHECK(loaded[c].series.nominal_capacity_ah ==
          doctest::Approx(fleet[c].series.nominal_capacity_ah).epsilon(1e-9));
    REQUIRE(loaded[c].series.size() == fleet[c].series.size());
    CHECK((loaded[c].series.capacity_ah - fleet[c].series.capacity_ah).cwiseAbs().maxCoeff() <
          1e-9);
    REQUIRE(loaded[c].cycles.size() == fleet[c].cycles.size());
    for (std::size_t j = 0; j < fleet[c].cycles.size(); ++j) {
      const auto& a = fleet[c].cycles[j];
      const auto& b = loaded[c].cycles[j];
      REQUIRE(a.t.size() == b.t.size());
      CHECK((a.t - b.t).cwiseAbs().maxCoeff() < 1e-6);
      CHECK((a.v - b.v).cwiseAbs().maxCoeff() < 1e-9);
      CHECK(a.discharge_capacity == doctest::Approx(b.discharge_capacity).epsilon(1e-9));
    }
    REQUIRE(loaded[c].truth.has_value());
    CHECK(loaded[c].truth->pattern == fleet[c].truth->pattern);
    CHECK(loaded[c].truth->eol_cycle == fleet[c].truth->eol_cycle);
  }
}

TEST_CASE("loader reports schema violations with file positions") {
  TmpDir dir("badcsv");
  {
    std::ofstream cap(dir.path() / "capacity.csv");
    cap << "cell_id,cycle,discharge_capacity_ah,nominal_capacity_ah\n";
    cap << "c1,1,1.08,1.1\nc1,2,1.07,1.1\nc2,1,1.09,1.1\n";
    std::ofstream cyc(dir.path() / "cycles.csv");
    cyc << "cell_id,cycle,t_s,voltage_v,current_a\n";
    cyc << "c1,1,0,3.0,1.1\nc1,1,5,3.1,1.1\nc1,1,3,3.2,1.1\n";
  }
  CHECK_THROWS_WITH_AS((void)load_dataset(dir.str()),
                       doctest::Contains("cell c1 cycle 1: t_s not strictly increasing"), Error);

  {
    std::ofstream cyc(dir.path() / "cycles.csv");
    cyc << "cell_id,cycle,t_s,voltage_v,current_a\n";
    cyc << "c9,1,0,3.0,1.1\nc9,1,5,3.1,1.1\n";
  }
  CHECK_THROWS_WITH_AS((void)load_dataset(dir.str()), doctest::Contains("no capacity row"),
                       Error);

  {
    std::ofstream cyc(dir.path() / "cycles.csv");
    cyc << "cell_id,cycle,t_s,voltage_v,current_a\n";
    cyc << "c1,1,0,3.0,1.1\nc1,1,5,3.1,1.1\nc2,1,0,3.0,1.1\nc2,1,4,3.2,1.1\n";
  }
  const auto fleet = load_dataset(dir.str());
  REQUIRE(fleet.size() == 2);
  CHECK(fleet[0].series.cell_id == "c1");
  CHECK(fleet[0].series.size() == 2);
  CHECK(fleet[1].series.size() == 1);
  CHECK(fleet[0].cycles.size() == 1);
}

TEST_CASE("loader rejects a malformed header") {
  TmpDir dir("badheader");
  {
    std::ofstream cap(dir.path() / "capacity.csv");
    cap << "cell,cycle,capacity\nc1,1,1.0\n";
    std::ofstream cyc(dir.path() / "cycles.csv");
    cyc << "cell_id,cycle,t_s,voltage_v,current_a\n";
  }
  CHECK_THROWS_WITH_AS((void)load_dataset(dir.str()), doctest::Contains("expected header"),
                       Error);
}
