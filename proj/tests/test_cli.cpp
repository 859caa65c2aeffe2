#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "tkpinn/io.hpp"
#include "tkpinn/phantom.hpp"

#ifndef TKPINN_CLI
#error "TKPINN_CLI must name the command-line binary"
#endif

namespace fs = std::filesystem;
using namespace tkp;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(TKPINN_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

class Cli : public ::testing::Test {
 protected:
  fs::path dir;
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("tkpinn_cli_") + info->name() + "_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string at(const std::string& name) const { return (dir / name).string(); }

  // Four-pixel curve CSV with no ground truth.
  std::string small_dataset() {
    const TimeGrid grid{0.0, 0.05, 40};
    const auto aif = GammaVariateAif::defaults().sample(grid);
    std::ostringstream s;
    s << "t,aif,a,b,c,d\n";
    std::vector<std::vector<double>> curves;
    for (int j = 0; j < 4; ++j) curves.push_back(solve_2cxm({0.6 + 0.4 * j, 0.05, 0.2, 1.0}, aif).tissue.values);
    for (std::size_t i = 0; i < grid.n; ++i) {
      s << grid.at(i) << ',' << aif.values[i];
      for (const auto& c : curves) s << ',' << c[i];
      s << '\n';
    }
    write(dir / "curves.csv", s.str());
    EXPECT_EQ(run("import-csv --csv " + at("curves.csv") + " --out " + at("small.pqd")).code, 0);
    return at("small.pqd");
  }
};

}  // namespace

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("no-such-command").code, 1);
  EXPECT_EQ(run("fit --method bogus --in x --out y").code, 1);
  write(dir / "bad.json", R"({"pinn": {"iterationz": 5}})");
  EXPECT_EQ(run("gen-dro --out " + at("a.pqd") + " --config " + at("bad.json")).code, 1);
  write(dir / "broken.json", "{not json");
  EXPECT_EQ(run("gen-dro --out " + at("a.pqd") + " --config " + at("broken.json")).code, 1);
  EXPECT_EQ(run("convert --fp 1.0 --hct 1.5").code, 1);
}

TEST_F(Cli, GenDroDefaultsAndNoiseless) {
  ASSERT_EQ(run("gen-dro --out " + at("d.pqd") + " --snr inf --seed 5").code, 0);
  const auto d = io::read_dataset(at("d.pqd"));
  EXPECT_EQ(d.dims, (VolumeDims{40, 120, 3}));
  EXPECT_EQ(d.grid.n, 100u);
  ASSERT_TRUE(d.truth.has_value());
  const auto meta = nlohmann::json::parse(d.metadata);
  EXPECT_EQ(meta["seed"], 5);
  EXPECT_EQ(meta["config"]["phantom"]["snr"], "inf");

  const auto aif = GammaVariateAif::defaults().sample(TimeGrid{});
  const auto clean = solve_2cxm({0.5, 0.02, 0.1, 0.5}, aif, 10).tissue.values;
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(d.curve(0)[i], static_cast<float>(clean[i]));
}

TEST_F(Cli, SameSeedGivesIdenticalBytes) {
  for (const char* name : {"a.pqd", "b.pqd"}) {
    ASSERT_EQ(run(std::string("gen-dro --mini --seed 9 --out ") + at(name)).code, 0);
  }
  EXPECT_EQ(slurp(dir / "a.pqd"), slurp(dir / "b.pqd"));
  ASSERT_EQ(run("gen-dro --mini --seed 10 --out " + at("c.pqd")).code, 0);
  EXPECT_NE(slurp(dir / "a.pqd"), slurp(dir / "c.pqd"));

  const std::string in = small_dataset();
  const std::string common = " --method pinn-combined --iterations 100 --quiet --seed 4 --config " + at("cfg.json");
  write(dir / "cfg.json", R"({"pinn": {"n_collocation": 30, "hidden_units": 8}})");
  ASSERT_EQ(run("fit --in " + in + " --out " + at("m1.pqm") + common).code, 0);
  ASSERT_EQ(run("fit --in " + in + " --out " + at("m2.pqm") + common).code, 0);
  EXPECT_EQ(slurp(dir / "m1.pqm"), slurp(dir / "m2.pqm"));
  EXPECT_EQ(slurp(dir / "m1.pqm.loss.csv"), slurp(dir / "m2.pqm.loss.csv"));
}

TEST_F(Cli, PinnFitWritesLossHistoryAndMetadata) {
  const std::string in = small_dataset();
  write(dir / "cfg.json", R"({"pinn": {"n_collocation": 30, "hidden_units": 8}})");
  ASSERT_EQ(run("fit --method pinn-reduced --iterations 300 --quiet --seed 2 --in " + in + " --out " + at("m.pqm") +
                " --config " + at("cfg.json"))
                .code,
            0);
  std::istringstream loss(slurp(dir / "m.pqm.loss.csv"));
  std::string line;
  std::getline(loss, line);
  EXPECT_EQ(line, "iter,L_C,L_r,L_b,L_reg,total,mean_Fp,mean_vp,mean_ve,mean_PS");
  int rows = 0;
  while (std::getline(loss, line)) ++rows;
  EXPECT_EQ(rows, 3);

  const auto maps = io::read_maps(at("m.pqm"));
  EXPECT_EQ(maps.method, "pinn-reduced");
  EXPECT_EQ(maps.seed, 2u);
  const auto cfg = nlohmann::json::parse(maps.config);
  EXPECT_EQ(cfg["seed"], 2);
  EXPECT_EQ(cfg["pinn"]["iterations"], 300);
  EXPECT_EQ(cfg["pinn"]["hidden_units"], 8);

  const auto sidecar = nlohmann::json::parse(slurp(dir / "m.pqm.loss.csv.meta.json"));
  EXPECT_EQ(sidecar["seed"], 2);
  EXPECT_EQ(sidecar["pinn"]["n_collocation"], 30);
}

TEST_F(Cli, NumericalFailureExitsThree) {
  const std::string in = small_dataset();
  write(dir / "cfg.json", R"({"pinn": {"n_collocation": 30, "hidden_units": 8, "learning_rate": 1e6}})");
  EXPECT_EQ(run("fit --method pinn-2cxm --iterations 50 --quiet --in " + in + " --out " + at("m.pqm") + " --config " +
                at("cfg.json"))
                .code,
            3);
}

TEST_F(Cli, EvalOfTruthAgainstItself) {
  ASSERT_EQ(run("gen-dro --out " + at("d.pqd") + " --seed 1").code, 0);
  const auto d = io::read_dataset(at("d.pqd"));
  io::MapResult m;
  m.dims = d.dims;
  m.maps = *d.truth;
  m.method = "truth";
  m.config = "{}";
  io::write_maps(at("t.pqm"), m);

  const auto r = run("eval --est " + at("t.pqm") + " --gt-dataset " + at("d.pqd") + " --out " + at("e.csv"));
  ASSERT_EQ(r.code, 0);
  std::istringstream csv(slurp(dir / "e.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "method,param,NMSE,SSIM");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    std::istringstream cells(line);
    std::string method, param, nmse, ssim;
    std::getline(cells, method, ',');
    std::getline(cells, param, ',');
    std::getline(cells, nmse, ',');
    std::getline(cells, ssim, ',');
    EXPECT_EQ(method, "truth");
    EXPECT_EQ(std::stod(nmse), 0.0) << param;
    EXPECT_NEAR(std::stod(ssim), 1.0, 1e-12) << param;
  }
  EXPECT_EQ(rows, 5);
  EXPECT_TRUE(fs::exists(dir / "e.csv.meta.json"));
}

TEST_F(Cli, EvalDataErrors) {
  const std::string in = small_dataset();
  io::MapResult m;
  m.dims = {4, 1, 1};
  for (auto& v : m.maps) v.assign(4, 1.0f);
  io::write_maps(at("m.pqm"), m);
  EXPECT_EQ(run("eval --est " + at("m.pqm") + " --gt-dataset " + in + " --out " + at("e.csv")).code, 2);
  EXPECT_EQ(run("eval --est " + in + " --gt-dataset " + in + " --out " + at("e.csv")).code, 2);
  EXPECT_EQ(run("eval --est " + at("missing.pqm") + " --gt-dataset " + in + " --out " + at("e.csv")).code, 2);
}

TEST_F(Cli, ConvertPrintsBloodUnits) {
  const auto r = run("convert --fp 1.0 --hct 0.45 --rho 1.05");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "Fb 1.7316 mL/min/g\n");
  const auto v = run("convert --fp 1.0 --vp 0.1");
  EXPECT_NE(v.out.find("vb "), std::string::npos);
}

TEST_F(Cli, RenderConstantMapIsUniform) {
  io::MapResult m;
  m.dims = {8, 9, 2};
  for (auto& v : m.maps) v.assign(m.dims.size(), 0.7f);
  m.config = "{}";
  io::write_maps(at("c.pqm"), m);
  ASSERT_EQ(run("render --maps " + at("c.pqm") + " --param ve --out " + at("c.pgm") + " --range 0 1.4").code, 0);
  const std::string pgm = slurp(dir / "c.pgm");
  const std::string header = "P5\n8 18\n255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  const std::string body = pgm.substr(header.size());
  ASSERT_EQ(body.size(), 8u * 18u);
  for (char c : body) EXPECT_EQ(c, body[0]);
}

TEST_F(Cli, RenderDroFpShowsFourBands) {
  ASSERT_EQ(run("gen-dro --out " + at("d.pqd") + " --snr inf").code, 0);
  ASSERT_EQ(run("render --maps " + at("d.pqd") + " --param Fp --out " + at("fp.pgm")).code, 0);
  const std::string pgm = slurp(dir / "fp.pgm");
  const std::string header = "P5\n40 360\n255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  const auto* px = reinterpret_cast<const unsigned char*>(pgm.data() + header.size());
  const unsigned char bands[4] = {0, 85, 170, 255};
  for (std::size_t row = 0; row < 360; ++row)
    for (std::size_t col = 0; col < 40; ++col) ASSERT_EQ(px[row * 40 + col], bands[col / 10]);
}

TEST_F(Cli, CsvRoundTrip) {
  const std::string in = small_dataset();
  ASSERT_EQ(run("export-csv --in " + in + " --out " + at("x.csv")).code, 0);
  ASSERT_EQ(run("import-csv --csv " + at("x.csv") + " --out " + at("y.pqd")).code, 0);
  const auto a = io::read_dataset(in), b = io::read_dataset(at("y.pqd"));
  EXPECT_EQ(a.curves, b.curves);
  EXPECT_EQ(a.aif, b.aif);
}
