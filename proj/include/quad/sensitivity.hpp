#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "quad/quant.hpp"

namespace quad {

constexpr double kJsSmoothing = 1e-12;
constexpr int kQssBins = 256;
constexpr double kDefaultTieEpsilon = 0.05;

// Jensen-Shannon divergence in nats. Inputs are probability vectors summing
// to 1 within 1e-6; both get additive smoothing before renormalization.
double JsDivergence(std::span<const double> p, std::span<const double> q);

// Divergence between the value distributions of two output tensors
// (256-bin histograms over their union range).
double OutputDivergence(const Tensor& reference, const Tensor& test);

// Mean output divergence between FP and QuantSim execution with the adapter bound.
double Qss(const ModelBundle& bundle, const LoRAAdapter& adapter, const QuantProfile& profile,
           std::span<const CalibrationSample> data, uint64_t seed);

struct AnchorChoice {
  bool unified = false;
  std::string adapter_id;  // empty when unified
  friend bool operator==(const AnchorChoice&, const AnchorChoice&) = default;
};

// Unified when (max - min) < tie_epsilon * max or max == 0; otherwise the
// highest-scoring adapter, ties broken by the lexicographically smallest id.
AnchorChoice SelectAnchor(const std::map<std::string, double>& scores, double tie_epsilon);

struct QssReport {
  std::map<std::string, double> scores;
  AnchorChoice anchor;
  double tie_epsilon = kDefaultTieEpsilon;
  std::string divergence = "jensen_shannon";
};

// Key-sorted text: one `<adapter_id> <qss>` line per adapter, then anchor, rule,
// tie_epsilon and divergence lines.
std::string ReportToText(const QssReport& report);

// Slot params from the concatenated factors of every adapter; base weights and
// activations calibrated with each adapter bound in turn.
QuantProfile UnifiedProfile(const ModelBundle& bundle, std::span<const LoRAAdapter> adapters,
                            std::span<const CalibrationSample> data, const CalibrationOptions& options);

struct SharedProfile {
  QuantProfile profile;
  QssReport report;
  std::map<std::string, QuantProfile> provisional;  // per-adapter calibration used for scoring
};

// Calibrates per adapter, scores QSS under that calibration, picks the anchor
// and returns its profile (or the unified profile when the tie rule fires).
// `qss_data` defaults to the calibration data when empty.
SharedProfile BuildSharedProfile(const ModelBundle& bundle, std::span<const LoRAAdapter> adapters,
                                 std::span<const CalibrationSample> data, const CalibrationOptions& options,
                                 double tie_epsilon, std::span<const CalibrationSample> qss_data = {});

}  // namespace quad
