#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "multiscm/panel.hpp"
#include "multiscm/rng.hpp"

namespace testutil {

/// Random balanced panel with labels u1.., p1.., y1..; values N(0,1) plus
/// unit and outcome shifts so series are non-degenerate.
inline mscm::PanelData random_panel(mscm::Rng& rng, int n, int t, int k, int t0,
                                    int treated = 0) {
    std::vector<std::string> units, periods, outcomes;
    for (int i = 0; i < n; ++i) units.push_back("u" + std::to_string(i + 1));
    for (int j = 0; j < t; ++j) periods.push_back(std::to_string(j + 1));
    for (int o = 0; o < k; ++o) outcomes.push_back("y" + std::to_string(o + 1));
    mscm::PanelData p(units, periods, outcomes, treated, t0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < t; ++j)
            for (int o = 0; o < k; ++o)
                p.set_value(i, j, o, rng.normal() + 0.5 * i + 0.25 * o);
    return p;
}

inline std::string to_csv(const mscm::PanelData& p) {
    std::ostringstream os;
    mscm::emit_panel(os, p);
    return os.str();
}

inline mscm::PanelData from_csv(const std::string& csv, const std::string& treated,
                                const std::string& t0_label) {
    std::istringstream is(csv);
    mscm::TreatmentConfig tc;
    tc.treated_unit = treated;
    tc.last_pre_period = t0_label;
    return mscm::load_panel(is, tc);
}

} // namespace testutil
