#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "contrastsurv/data_model.hpp"

namespace cs = contrastsurv;

namespace {

std::filesystem::path temp_dir() {
  const auto dir = std::filesystem::temp_directory_path() / "contrastsurv_test_data";
  std::filesystem::create_directories(dir);
  return dir;
}

cs::ExpressionMatrix small_matrix() {
  cs::ExpressionMatrix m;
  m.sample_ids = {"s1", "s2", "s3"};
  m.gene_ids = {"g1", "g2", "g3", "g4", "g5"};
  m.values.resize(3, 5);
  m.values << 0, 1, 3, 7, 2.5, 10, 0.25, 6, 1, 0, 5, 5, 5, 0.125, 9;
  m.scale = cs::Scale::RawCount;
  return m;
}

}  // namespace

TEST_CASE("load_expression_tsv ingests a small matrix verbatim") {
  const auto path = temp_dir() / "tiny.tsv";
  std::ofstream out(path);
  out << "gene_id\ts1\ts2\n";
  out << "g1\t1\t3\n";
  out << "g2\t2\t4\n";
  out.close();

  const auto m = cs::load_expression_tsv(path.string(), cs::Orientation::GenesAsRows);
  REQUIRE(m.sample_ids == std::vector<std::string>{"s1", "s2"});
  REQUIRE(m.gene_ids == std::vector<std::string>{"g1", "g2"});
  REQUIRE(m.values(0, 0) == 1.0);
  REQUIRE(m.values(0, 1) == 2.0);
  REQUIRE(m.values(1, 0) == 3.0);
  REQUIRE(m.values(1, 1) == 4.0);
  REQUIRE(m.scale == cs::Scale::RawCount);
}

TEST_CASE("duplicate gene ids are rejected by name") {
  const auto path = temp_dir() / "dup.tsv";
  std::ofstream out(path);
  out << "gene_id\ts1\n";
  out << "TP53\t1\n";
  out << "TP53\t2\n";
  out.close();
  REQUIRE_THROWS_WITH(cs::load_expression_tsv(path.string(), cs::Orientation::GenesAsRows),
                      Catch::Matchers::ContainsSubstring("TP53"));
}

TEST_CASE("malformed cells report their location") {
  const auto path = temp_dir() / "bad.tsv";
  std::ofstream out(path);
  out << "gene_id\ts1\n";
  out << "g1\tnot_a_number\n";
  out.close();
  REQUIRE_THROWS_AS(cs::load_expression_tsv(path.string(), cs::Orientation::GenesAsRows),
                    cs::ValidationError);
}

TEST_CASE("expression write-then-load round-trips bit-identically") {
  const auto m = small_matrix();
  const auto path = temp_dir() / "roundtrip.tsv";
  cs::write_expression_tsv(m, path.string());
  const auto loaded = cs::load_expression_tsv(path.string(), cs::Orientation::GenesAsRows);
  REQUIRE(loaded.sample_ids == m.sample_ids);
  REQUIRE(loaded.gene_ids == m.gene_ids);
  REQUIRE(loaded.scale == m.scale);
  for (Eigen::Index s = 0; s < m.n_samples(); ++s)
    for (Eigen::Index g = 0; g < m.n_genes(); ++g) REQUIRE(loaded.values(s, g) == m.values(s, g));

  // a second write produces the same bytes
  const auto path2 = temp_dir() / "roundtrip2.tsv";
  cs::write_expression_tsv(loaded, path2.string());
  std::ifstream a(path), b(path2);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  REQUIRE(sa.str() == sb.str());
}

TEST_CASE("log2 transform fixed points and oracle") {
  auto m = small_matrix();
  m.values(0, 0) = 0.0;
  m.values(0, 1) = 1.0;
  m.values(0, 2) = 3.0;
  const auto t = cs::log2_transform(m);
  REQUIRE(t.scale == cs::Scale::Log2);
  REQUIRE(t.values(0, 0) == 0.0);
  REQUIRE(t.values(0, 1) == 1.0);
  REQUIRE(t.values(0, 2) == 2.0);

  // element-wise scalar re-evaluation
  for (Eigen::Index s = 0; s < m.n_samples(); ++s)
    for (Eigen::Index g = 0; g < m.n_genes(); ++g)
      REQUIRE_THAT(t.values(s, g), Catch::Matchers::WithinAbs(
                                       std::log2(1.0 + m.values(s, g)), 1e-12));
}

TEST_CASE("log2 transform is strictly monotone element-wise") {
  auto m = small_matrix();
  const auto t = cs::log2_transform(m);
  for (Eigen::Index g = 0; g < m.n_genes(); ++g) {
    for (Eigen::Index a = 0; a < m.n_samples(); ++a)
      for (Eigen::Index b = 0; b < m.n_samples(); ++b)
        if (m.values(a, g) < m.values(b, g)) REQUIRE(t.values(a, g) < t.values(b, g));
  }
}

TEST_CASE("log2 transform rejects negatives") {
  auto m = small_matrix();
  m.values(1, 1) = -2.0;
  REQUIRE_THROWS_AS(cs::log2_transform(m), cs::ValidationError);
}

TEST_CASE("rpkm_to_counts multiplies by gene length") {
  cs::ExpressionMatrix m;
  m.sample_ids = {"s1"};
  m.gene_ids = {"g1", "g2", "g3"};
  m.values.resize(1, 3);
  m.values << 2.0, 0.0, 1.5;
  m.scale = cs::Scale::RPKM;
  const std::map<std::string, double> lengths{{"g1", 500.0}, {"g2", 1000.0}, {"g3", 200.0}};
  const auto counts = cs::rpkm_to_counts(m, lengths);
  REQUIRE(counts.scale == cs::Scale::RawCount);
  REQUIRE(counts.values(0, 0) == 1000.0);
  REQUIRE(counts.values(0, 1) == 0.0);
  REQUIRE_THAT(counts.values(0, 2), Catch::Matchers::WithinAbs(1.5 * 200.0, 1e-12));

  // counts -> RPKM -> counts is the identity
  auto back = counts;
  back.scale = cs::Scale::RPKM;
  for (Eigen::Index g = 0; g < back.n_genes(); ++g)
    back.values.col(g) /= lengths.at(back.gene_ids[static_cast<std::size_t>(g)]);
  const auto again = cs::rpkm_to_counts(back, lengths);
  for (Eigen::Index g = 0; g < again.n_genes(); ++g)
    REQUIRE_THAT(again.values(0, g),
                 Catch::Matchers::WithinRel(counts.values(0, g), 1e-9));
}

TEST_CASE("rpkm_to_counts lists missing lengths") {
  cs::ExpressionMatrix m;
  m.sample_ids = {"s1"};
  m.gene_ids = {"g1", "g2"};
  m.values.resize(1, 2);
  m.values << 1.0, 2.0;
  m.scale = cs::Scale::RPKM;
  REQUIRE_THROWS_WITH(cs::rpkm_to_counts(m, {{"g1", 100.0}}),
                      Catch::Matchers::ContainsSubstring("g2"));
}

TEST_CASE("housekeeping_normalize hits the target mean") {
  cs::ExpressionMatrix m;
  m.sample_ids = {"s1", "s2"};
  m.gene_ids = {"VCP", "RAB7A", "GPI", "other1", "other2", "other3", "other4", "other5",
                "other6", "other7"};
  m.values.resize(2, 10);
  m.values << 4, 8, 12, 1, 2, 3, 4, 5, 6, 7, 8, 16, 24, 2, 4, 6, 8, 10, 12, 14;
  m.scale = cs::Scale::RawCount;
  const std::vector<std::string> refs{"VCP", "RAB7A", "GPI"};

  // grand mean over (reference gene x sample) cells: (4+8+12+8+16+24)/6 = 12
  const double e_cohort = 12.0;
  SECTION("identity factor") {
    const auto [out, f] = cs::housekeeping_normalize(m, refs, e_cohort);
    REQUIRE_THAT(f.factor, Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE(out.values == m.values);
  }
  SECTION("doubling") {
    const auto [out, f] = cs::housekeeping_normalize(m, refs, 2.0 * e_cohort);
    REQUIRE_THAT(f.factor, Catch::Matchers::WithinAbs(2.0, 1e-12));
    REQUIRE_THAT(out.values(1, 3), Catch::Matchers::WithinAbs(4.0, 1e-12));
  }
  SECTION("hand-computed factor") {
    const auto [out, f] = cs::housekeeping_normalize(m, refs, 30.0);
    REQUIRE_THAT(f.e_cohort, Catch::Matchers::WithinAbs(12.0, 1e-12));
    REQUIRE_THAT(f.factor, Catch::Matchers::WithinAbs(2.5, 1e-12));

    // re-measuring on the normalized matrix yields e_target
    const auto [again, f2] = cs::housekeeping_normalize(out, refs, 30.0);
    REQUIRE_THAT(f2.e_cohort, Catch::Matchers::WithinRel(30.0, 1e-9));
  }
}

TEST_CASE("housekeeping_normalize error paths") {
  auto m = small_matrix();
  REQUIRE_THROWS_AS(cs::housekeeping_normalize(m, {"absent"}, 1.0), cs::ValidationError);
  m.values.setZero();
  REQUIRE_THROWS_AS(cs::housekeeping_normalize(m, {"g1"}, 1.0), cs::ValidationError);
}

TEST_CASE("align_genes fills, drops, and reports") {
  auto m = small_matrix();
  SECTION("identity") {
    const auto [out, report] = cs::align_genes(m, m.gene_ids);
    REQUIRE(out.gene_ids == m.gene_ids);
    REQUIRE(out.values == m.values);
    REQUIRE(report.missing == 0);
    REQUIRE(report.dropped == 0);
    REQUIRE(report.matched == 5);
  }
  SECTION("missing genes become zero columns at the right positions") {
    const std::vector<std::string> ref{"gx", "g2", "gy", "g4", "g1"};
    const auto [out, report] = cs::align_genes(m, ref);
    REQUIRE(out.gene_ids == ref);
    REQUIRE(report.missing == 2);
    REQUIRE(report.dropped == 2);  // g3, g5
    REQUIRE(out.values.col(0).isZero());
    REQUIRE(out.values.col(2).isZero());
    REQUIRE(out.values.col(1) == m.values.col(1));
    REQUIRE(out.values.col(3) == m.values.col(3));
    REQUIRE(out.values.col(4) == m.values.col(0));
  }
  SECTION("empty intersection gives an all-zero matrix") {
    const auto [out, report] = cs::align_genes(m, {"x1", "x2"});
    REQUIRE(out.values.isZero());
    REQUIRE(report.missing == 2);
    REQUIRE(report.matched == 0);
  }
  SECTION("idempotence") {
    const std::vector<std::string> ref{"g5", "g1", "gz"};
    const auto [once, r1] = cs::align_genes(m, ref);
    const auto [twice, r2] = cs::align_genes(once, ref);
    REQUIRE(twice.gene_ids == once.gene_ids);
    REQUIRE(twice.values == once.values);
    REQUIRE(r2.missing == 0);  // gz now exists as a zero column
    REQUIRE(r2.dropped == 0);
  }
}

TEST_CASE("clinical table loading and join") {
  const auto clin_path = temp_dir() / "clinical.tsv";
  std::ofstream out(clin_path);
  out << "sample_id\ttime_days\tevent\n";
  out << "s1\t120.5\t1\n";
  out << "s2\tNA\t0\n";
  out << "s3\t300\t0\n";
  out << "s4\t50\t1\n";
  out.close();

  std::vector<std::string> missing;
  const auto table = cs::load_clinical_tsv(clin_path.string(), &missing);
  REQUIRE(missing == std::vector<std::string>{"s2"});
  REQUIRE(table.sample_ids == std::vector<std::string>{"s1", "s3", "s4"});
  REQUIRE(table.time(0) == 120.5);

  const auto m = small_matrix();  // samples s1, s2, s3
  const auto [cohort, report] = cs::join_cohort(m, table, "TEST");
  REQUIRE(cohort.expression.sample_ids == std::vector<std::string>{"s1", "s3"});
  REQUIRE(cohort.clinical.sample_ids == cohort.expression.sample_ids);
  REQUIRE(report.dropped_samples == std::vector<std::string>{"s2"});
}

TEST_CASE("clinical table requires its columns") {
  const auto path = temp_dir() / "noevent.tsv";
  std::ofstream out(path);
  out << "sample_id\ttime_days\n";
  out << "s1\t10\n";
  out.close();
  REQUIRE_THROWS_WITH(cs::load_clinical_tsv(path.string()),
                      Catch::Matchers::ContainsSubstring("event"));
}

TEST_CASE("drop_negative_genes removes whole columns") {
  auto m = small_matrix();
  m.values(2, 1) = -1.0;
  const auto [out, dropped] = cs::drop_negative_genes(m);
  REQUIRE(dropped == std::vector<std::string>{"g2"});
  REQUIRE(out.n_genes() == 4);
  REQUIRE(out.gene_ids == std::vector<std::string>{"g1", "g3", "g4", "g5"});
}

TEST_CASE("gzip expression input is read transparently") {
  const auto m = small_matrix();
  const auto plain = temp_dir() / "gz_src.tsv";
  cs::write_expression_tsv(m, plain.string());
  const auto gz = temp_dir() / "gz_src.tsv.gz";
  std::string cmd = "gzip -c " + plain.string() + " > " + gz.string();
  REQUIRE(std::system(cmd.c_str()) == 0);
  const auto loaded = cs::load_expression_tsv(gz.string(), cs::Orientation::GenesAsRows);
  REQUIRE(loaded.values == m.values);
}
