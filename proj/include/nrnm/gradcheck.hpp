#pragma once

// Central finite-difference check of analytic parameter gradients.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "nrnm/autograd.hpp"
#include "nrnm/checkpoint.hpp"
#include "nrnm/model.hpp"
#include "nrnm/tasks.hpp"

namespace nrnm {

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Gradients whose largest magnitude is below this are compared on an
  // absolute scale of floor.
  double floor = 1e-6;
  // Entries checked per parameter; 0 checks every entry. Otherwise the
  // entries are an evenly spaced subset.
  std::size_t max_entries = 0;
};

struct GradcheckRow {
  std::string name;
  std::size_t checked = 0;
  double max_abs_error = 0.0;
  // max |analytic - numeric| / max(max |analytic|, max |numeric|, floor),
  // maxima taken over the checked entries of this parameter.
  double max_rel_error = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  bool pass() const;
  // First failing parameter, or empty.
  std::string first_failure() const;
};

// loss builds a scalar on the given F64 graph from the current parameter
// values. It is called once for the analytic pass and twice per entry.
GradcheckReport gradcheck(ParameterStore& params, const std::function<Var(Graph&)>& loss,
                          const GradcheckOptions& options = {});

// Deterministic (dropout off) loss of model on batch.
GradcheckReport gradcheck(SequenceModel& model, const SequenceBatch& batch, const GradcheckOptions& options = {});

std::string format_report(const GradcheckReport& report);

}  // namespace nrnm
