#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "multiscm/errors.hpp"

namespace mscm {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) { return std::isnan(v); }

/// Treatment settings for a panel: which unit is treated, the last
/// pre-treatment period (by label), and optional per-outcome sign flips.
struct TreatmentConfig {
    std::string treated_unit;
    std::string last_pre_period;
    std::map<std::string, double> signs; // default multiplier is +1
};

/// Balanced multi-outcome panel. Values are dense over
/// (unit, period, outcome) with NaN marking missing cells.
/// Immutable by convention once built; transforms return copies.
class PanelData {
public:
    PanelData() = default;
    PanelData(std::vector<std::string> units,
              std::vector<std::string> period_labels,
              std::vector<std::string> outcomes,
              int treated, int t0)
        : units_(std::move(units)),
          period_labels_(std::move(period_labels)),
          outcomes_(std::move(outcomes)),
          treated_(treated), t0_(t0),
          values_(units_.size() * period_labels_.size() * outcomes_.size(), kMissing) {
        validate_shape();
    }

    int n_units() const { return static_cast<int>(units_.size()); }
    int n_periods() const { return static_cast<int>(period_labels_.size()); }
    int n_outcomes() const { return static_cast<int>(outcomes_.size()); }
    int n_donors() const { return n_units() - 1; }
    int n_pre() const { return t0_; }
    int n_post() const { return n_periods() - t0_; }
    int treated() const { return treated_; }
    int t0() const { return t0_; }

    const std::vector<std::string>& units() const { return units_; }
    const std::vector<std::string>& periods() const { return period_labels_; }
    const std::vector<std::string>& outcomes() const { return outcomes_; }

    double value(int i, int t, int k) const { return values_[idx(i, t, k)]; }
    void set_value(int i, int t, int k, double v) { values_[idx(i, t, k)] = v; }

    /// Donor unit indices in stable (input) order.
    std::vector<int> donors() const {
        std::vector<int> d;
        d.reserve(n_donors());
        for (int i = 0; i < n_units(); ++i)
            if (i != treated_) d.push_back(i);
        return d;
    }

    bool operator==(const PanelData& o) const {
        if (units_ != o.units_ || period_labels_ != o.period_labels_ ||
            outcomes_ != o.outcomes_ || treated_ != o.treated_ || t0_ != o.t0_)
            return false;
        for (std::size_t j = 0; j < values_.size(); ++j) {
            const bool ma = is_missing(values_[j]), mb = is_missing(o.values_[j]);
            if (ma != mb) return false;
            if (!ma && values_[j] != o.values_[j]) return false;
        }
        return true;
    }

private:
    std::size_t idx(int i, int t, int k) const {
        return (static_cast<std::size_t>(i) * n_periods() + t) * n_outcomes() + k;
    }
    void validate_shape() const {
        if (units_.size() < 2) throw ValidationError("panel needs a treated unit and at least one donor");
        if (treated_ < 0 || treated_ >= n_units()) throw ValidationError("treated unit index out of range");
        if (t0_ < 1 || t0_ >= n_periods()) throw ValidationError("t0 must satisfy 1 <= t0 < T");
        if (outcomes_.empty()) throw ValidationError("panel needs at least one outcome");
    }

    std::vector<std::string> units_;
    std::vector<std::string> period_labels_;
    std::vector<std::string> outcomes_;
    int treated_ = 0;
    int t0_ = 0;
    std::vector<double> values_;
};

/// Record of the transforms applied to a panel, kept so gaps can be
/// mapped back to original units.
struct TransformState {
    Eigen::MatrixXd pre_means; // N x K, pre-treatment means per unit/outcome
    Eigen::VectorXd scales;    // K, per-outcome standardization divisors
    bool demeaned = false;
    bool standardized = false;
};

namespace detail {

/// Sort key for a period label: plain integer, or ISO date YYYY-MM-DD.
inline long long period_key(const std::string& label) {
    if (label.empty()) throw ValidationError("empty period label");
    bool all_digit = true;
    std::size_t start = (label[0] == '-') ? 1 : 0;
    for (std::size_t i = start; i < label.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(label[i]))) { all_digit = false; break; }
    if (all_digit && label.size() > start) return std::stoll(label);
    int y, m, d;
    char c1, c2;
    std::istringstream ss(label);
    if ((ss >> y >> c1 >> m >> c2 >> d) && c1 == '-' && c2 == '-' &&
        m >= 1 && m <= 12 && d >= 1 && d <= 31)
        return static_cast<long long>(y) * 10000 + m * 100 + d;
    throw ValidationError("cannot parse period label '" + label + "' as integer or ISO date");
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

} // namespace detail

/// Read a long-format panel (header: unit,period,outcome,value) and apply
/// the treatment configuration. Cells absent from the stream stay missing.
inline PanelData load_panel(std::istream& in, const TreatmentConfig& config) {
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty panel stream");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    {
        auto header = detail::split_csv_line(line);
        if (header.size() != 4 || header[0] != "unit" || header[1] != "period" ||
            header[2] != "outcome" || header[3] != "value")
            throw ValidationError("expected header 'unit,period,outcome,value'");
    }

    struct Row { std::string unit, period, outcome; double value; };
    std::vector<Row> rows;
    std::vector<std::string> units, outcomes;
    std::map<std::string, int> unit_ix, outcome_ix;
    std::map<long long, std::string> periods_by_key;

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != 4)
            throw ValidationError("line " + std::to_string(lineno) + ": expected 4 fields");
        double v = kMissing;
        if (!f[3].empty()) {
            try {
                std::size_t pos = 0;
                v = std::stod(f[3], &pos);
                if (pos != f[3].size()) throw std::invalid_argument("");
            } catch (...) {
                throw ValidationError("line " + std::to_string(lineno) + ": bad value '" + f[3] + "'");
            }
            if (!std::isfinite(v))
                throw ValidationError("line " + std::to_string(lineno) + ": non-finite value");
        }
        if (unit_ix.emplace(f[0], static_cast<int>(units.size())).second) units.push_back(f[0]);
        if (outcome_ix.emplace(f[2], static_cast<int>(outcomes.size())).second) outcomes.push_back(f[2]);
        periods_by_key.emplace(detail::period_key(f[1]), f[1]);
        rows.push_back({f[0], f[1], f[2], v});
    }
    if (rows.empty()) throw ValidationError("panel stream has no data rows");

    std::vector<std::string> period_labels;
    std::map<std::string, int> period_ix;
    for (const auto& [key, label] : periods_by_key) {
        period_ix[label] = static_cast<int>(period_labels.size());
        period_labels.push_back(label);
    }

    auto it = unit_ix.find(config.treated_unit);
    if (it == unit_ix.end())
        throw ValidationError("treated unit '" + config.treated_unit + "' not found in panel");
    const int treated = it->second;

    auto pt = period_ix.find(config.last_pre_period);
    if (pt == period_ix.end())
        throw ValidationError("t0 period '" + config.last_pre_period + "' not found in panel");
    const int t0 = pt->second + 1; // count of pre periods
    if (t0 >= static_cast<int>(period_labels.size()))
        throw ValidationError("t0 must leave at least one post-treatment period");
    if (units.size() < 3)
        throw ValidationError("need at least 2 donor units");

    PanelData panel(units, period_labels, outcomes, treated, t0);
    for (const auto& r : rows) {
        const int i = unit_ix[r.unit], t = period_ix[r.period], k = outcome_ix[r.outcome];
        if (!is_missing(panel.value(i, t, k)))
            throw ValidationError("duplicate row for (" + r.unit + "," + r.period + "," + r.outcome + ")");
        double sign = 1.0;
        if (auto s = config.signs.find(r.outcome); s != config.signs.end()) sign = s->second;
        panel.set_value(i, t, k, is_missing(r.value) ? kMissing : sign * r.value);
    }

    // every (unit, outcome) needs at least 2 non-missing pre values
    for (int i = 0; i < panel.n_units(); ++i)
        for (int k = 0; k < panel.n_outcomes(); ++k) {
            int n = 0;
            for (int t = 0; t < panel.t0(); ++t)
                if (!is_missing(panel.value(i, t, k))) ++n;
            if (n < 2)
                throw ValidationError("unit '" + units[i] + "', outcome '" + outcomes[k] +
                                      "' has fewer than 2 non-missing pre-treatment values");
        }
    return panel;
}

/// Write a panel in the long format load_panel reads.
inline void emit_panel(std::ostream& out, const PanelData& panel) {
    out << "unit,period,outcome,value\n";
    char buf[64];
    for (int i = 0; i < panel.n_units(); ++i)
        for (int t = 0; t < panel.n_periods(); ++t)
            for (int k = 0; k < panel.n_outcomes(); ++k) {
                out << panel.units()[i] << ',' << panel.periods()[t] << ','
                    << panel.outcomes()[k] << ',';
                const double v = panel.value(i, t, k);
                if (!is_missing(v)) {
                    std::snprintf(buf, sizeof(buf), "%.17g", v);
                    out << buf;
                }
                out << '\n';
            }
}

/// Subtract each (unit, outcome)'s pre-treatment mean from its whole series.
/// Post-treatment cells use the same pre-treatment mean.
inline std::pair<PanelData, TransformState> demean(const PanelData& panel) {
    TransformState state;
    state.pre_means.setZero(panel.n_units(), panel.n_outcomes());
    state.scales = Eigen::VectorXd::Ones(panel.n_outcomes());
    PanelData out = panel;
    for (int i = 0; i < panel.n_units(); ++i)
        for (int k = 0; k < panel.n_outcomes(); ++k) {
            double sum = 0;
            int n = 0;
            for (int t = 0; t < panel.t0(); ++t) {
                const double v = panel.value(i, t, k);
                if (!is_missing(v)) { sum += v; ++n; }
            }
            if (n == 0)
                throw ValidationError("all pre-treatment values missing for unit '" +
                                      panel.units()[i] + "', outcome '" + panel.outcomes()[k] + "'");
            const double mean = sum / n;
            state.pre_means(i, k) = mean;
            for (int t = 0; t < panel.n_periods(); ++t) {
                const double v = panel.value(i, t, k);
                if (!is_missing(v)) out.set_value(i, t, k, v - mean);
            }
        }
    state.demeaned = true;
    return {std::move(out), std::move(state)};
}

/// Per-outcome pooled pre-treatment sample standard deviation of the
/// de-meaned values (denominator n-1), pooled over all units.
inline Eigen::VectorXd pooled_pre_scales(const PanelData& panel) {
    auto [dm, st] = demean(panel);
    Eigen::VectorXd scales(panel.n_outcomes());
    for (int k = 0; k < panel.n_outcomes(); ++k) {
        double ss = 0;
        long n = 0;
        for (int i = 0; i < panel.n_units(); ++i)
            for (int t = 0; t < panel.t0(); ++t) {
                const double v = dm.value(i, t, k);
                if (!is_missing(v)) { ss += v * v; ++n; }
            }
        if (n < 2 || ss <= 0)
            throw ValidationError("zero pre-treatment variance for outcome '" +
                                  panel.outcomes()[k] + "'");
        // de-meaned values have mean ~0 per unit; pooled sample variance
        scales(k) = std::sqrt(ss / (n - 1));
    }
    return scales;
}

/// Divide each outcome's cells by its pooled pre-treatment standard
/// deviation (computed on the de-meaned series).
inline std::pair<PanelData, TransformState> standardize(const PanelData& panel,
                                                        TransformState state = {}) {
    const Eigen::VectorXd scales = pooled_pre_scales(panel);
    PanelData out = panel;
    for (int k = 0; k < panel.n_outcomes(); ++k)
        for (int i = 0; i < panel.n_units(); ++i)
            for (int t = 0; t < panel.n_periods(); ++t) {
                const double v = panel.value(i, t, k);
                if (!is_missing(v)) out.set_value(i, t, k, v / scales(k));
            }
    if (state.pre_means.size() == 0) {
        state.pre_means.setZero(panel.n_units(), panel.n_outcomes());
        state.scales = Eigen::VectorXd::Ones(panel.n_outcomes());
    }
    state.scales = state.scales.cwiseProduct(scales);
    state.standardized = true;
    return {std::move(out), std::move(state)};
}

/// De-mean then standardize, merging the transform records.
inline std::pair<PanelData, TransformState> transform(const PanelData& panel) {
    auto [dm, state] = demean(panel);
    auto [std_panel, state2] = standardize(dm, std::move(state));
    return {std::move(std_panel), std::move(state2)};
}

/// The N x (T0*K) matrix of de-meaned, standardized pre-treatment outcomes,
/// columns grouped by outcome (outcome-major, period-minor). Missing cells
/// become 0, i.e. the unit's pre-treatment mean.
inline Eigen::MatrixXd low_rank_matrix(const PanelData& transformed_panel) {
    const auto& p = transformed_panel;
    Eigen::MatrixXd m(p.n_units(), p.t0() * p.n_outcomes());
    for (int i = 0; i < p.n_units(); ++i)
        for (int k = 0; k < p.n_outcomes(); ++k)
            for (int t = 0; t < p.t0(); ++t) {
                const double v = p.value(i, t, k);
                m(i, k * p.t0() + t) = is_missing(v) ? 0.0 : v;
            }
    return m;
}

/// validate_low_rank_inputs per the module contract: transform, then build.
inline Eigen::MatrixXd validate_low_rank_inputs(const PanelData& raw_panel) {
    auto [tp, st] = transform(raw_panel);
    return low_rank_matrix(tp);
}

} // namespace mscm
