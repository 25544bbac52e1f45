#include <gtest/gtest.h>

#include "ssm/harness.hpp"

namespace ssm {
namespace {

TEST(BenchScaling, OneRecordPerCellWithPassCounts) {
  BenchConfig cfg;
  cfg.dims = {2, 4, 6, 8};
  cfg.objectives = {ObjectiveKind::sm_exact, ObjectiveKind::ssm};
  cfg.hidden = {8};
  cfg.batch_size = 10;
  cfg.reps = 5;
  const auto records = run_bench_scaling(cfg);
  ASSERT_EQ(records.size(), 8u);
  for (const BenchRecord& r : records) {
    EXPECT_GT(r.median_seconds, 0.0);
    EXPECT_EQ(r.reps, 5);
    const std::size_t expected =
        r.objective == ObjectiveKind::sm_exact ? static_cast<std::size_t>(r.dim) + 1 : 2;
    EXPECT_EQ(r.backward_passes, expected) << r.dim << " " << to_string(r.objective);
  }
  EXPECT_EQ(bench_csv_header(), "dim,objective,median_seconds,mean_seconds,backward_passes,reps");
}

TEST(BenchScaling, RejectsUnorderedDims) {
  BenchConfig cfg;
  cfg.dims = {4, 2};
  EXPECT_THROW(run_bench_scaling(cfg), std::invalid_argument);
}

TEST(DsmGrid, DuplicateSigmasAgreeAndArgminIsSmallestLoss) {
  DsmGridConfig cfg;
  cfg.sigmas = {0.5, 0.1, 0.5, 1.0};
  cfg.n_train = 4000;
  cfg.n_validation = 1000;
  cfg.seed = 3;
  const DsmGridResult result = run_dsm_grid(cfg);
  ASSERT_EQ(result.cells.size(), 4u);
  for (const auto& c : result.cells) ASSERT_TRUE(c.ok) << c.failure;
  EXPECT_EQ(result.cells[0].validation_loss, result.cells[2].validation_loss);
  EXPECT_EQ(result.cells[0].precision, result.cells[2].precision);
  ASSERT_GE(result.argmin, 0);
  for (const auto& c : result.cells) {
    EXPECT_GE(c.validation_loss, result.cells[static_cast<std::size_t>(result.argmin)].validation_loss);
  }
  // Fitted precision is biased towards 1/(1 + sigma^2) for unit-variance data.
  EXPECT_NEAR(result.cells[3].precision(0, 0), 0.5, 0.05);
}

TEST(DsmGrid, RejectsNonPositiveSigma) {
  DsmGridConfig cfg;
  cfg.sigmas = {0.1, 0.0};
  EXPECT_THROW(run_dsm_grid(cfg), std::invalid_argument);
}

}  // namespace
}  // namespace ssm
