#pragma once

// Self-contained SVG renderings of the result types. Numeric labels are the
// shortest round-trip form of the values they annotate.

#include <span>
#include <string>
#include <vector>

#include "plab/entropy.hpp"
#include "plab/geometry.hpp"
#include "plab/intervention.hpp"
#include "plab/semantic.hpp"

namespace plab {

std::string svg_role_bars(const RoleStats& stats);
std::string svg_matrix(const CrossMatrixResult& result);
/// Scatter of (rel_excess, rel_delta) with the fitted line, labelled "a = <slope>".
std::string svg_sweep(std::span<const SweepRecord> records, const FeedbackFit& fit);

struct PcPanel {
  std::string feature;
  std::string condition;
  PcaResult pca;
  std::vector<double> bin_values;  // colour scale
};
/// Grid with one column per feature and one row per condition.
std::string svg_pc_grid(std::span<const PcPanel> panels);

std::string svg_verdict_bars(std::span<const VerdictResult> results);
std::string svg_trajectories(std::span<const Trajectory> series, std::span<const std::string> labels);
std::string svg_steering(const SteeringSweepResult& result);
std::string svg_commitment(std::span<const CommitmentStats> rows);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace plab
