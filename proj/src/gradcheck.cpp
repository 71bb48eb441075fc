#include "nrnm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "nrnm/errors.hpp"

namespace nrnm {

bool GradcheckReport::pass() const {
  return std::all_of(rows.begin(), rows.end(), [](const GradcheckRow& r) { return r.pass; });
}

std::string GradcheckReport::first_failure() const {
  for (const auto& r : rows)
    if (!r.pass) return r.name;
  return {};
}

GradcheckReport gradcheck(ParameterStore& params, const std::function<Var(Graph&)>& loss,
                          const GradcheckOptions& options) {
  params.zero_grad();
  {
    Graph g(Precision::F64);
    g.backward(loss(g));
  }
  auto evaluate = [&] {
    Graph g(Precision::F64, false);
    return loss(g).value().item();
  };

  GradcheckReport report;
  for (const auto& p : params.all()) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> entries;
    if (options.max_entries == 0 || options.max_entries >= n) {
      for (std::size_t i = 0; i < n; ++i) entries.push_back(i);
    } else {
      for (std::size_t j = 0; j < options.max_entries; ++j) entries.push_back(j * n / options.max_entries);
    }
    GradcheckRow row;
    row.name = p->name;
    double scale = options.floor, worst = 0.0;
    for (std::size_t i : entries) {
      double& x = p->value[i];
      const double saved = x;
      x = saved + options.eps;
      const double up = evaluate();
      x = saved - options.eps;
      const double down = evaluate();
      x = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double analytic = p->grad[i];
      worst = std::max(worst, std::abs(analytic - numeric));
      scale = std::max({scale, std::abs(analytic), std::abs(numeric)});
    }
    row.checked = entries.size();
    row.max_abs_error = worst;
    row.max_rel_error = worst / scale;
    row.pass = row.max_rel_error < options.tolerance;
    report.rows.push_back(std::move(row));
  }
  return report;
}

GradcheckReport gradcheck(SequenceModel& model, const SequenceBatch& batch, const GradcheckOptions& options) {
  return gradcheck(
      model.params(),
      [&](Graph& g) { return nll_loss(model.forward(g, batch).logits, batch.labels); }, options);
}

std::string format_report(const GradcheckReport& report) {
  std::string out = fmt::format("{:<28} {:>8} {:>12} {:>12}  result\n", "parameter", "checked", "max_abs", "max_rel");
  for (const auto& r : report.rows) {
    out += fmt::format("{:<28} {:>8} {:>12.3e} {:>12.3e}  {}\n", r.name, r.checked, r.max_abs_error, r.max_rel_error,
                       r.pass ? "ok" : "FAIL");
  }
  return out;
}

}  // namespace nrnm
