#pragma once

#include <string>

namespace stagelm::carbon {

struct CarbonInput {
  double device_hours = 0;
  double device_power_w = 0;
  double pue = 1.0;
  double carbon_intensity = 0;  // tCO2eq per MWh

  void validate() const;
};

struct CarbonReport {
  double mwh = 0;
  double tco2eq = 0;
  CarbonInput inputs;
};

// mwh = hours · watts · pue / 1e6; tco2eq = mwh · intensity.
CarbonReport estimate(const CarbonInput& in);

// Rounds to `digits` significant figures, for display only.
std::string format_sig(double v, int digits);

// "57.1 MWh, 4.51 tCO2eq"
std::string format_report(const CarbonReport& r, int digits = 3);
std::string csv_header();
std::string csv_row(const CarbonReport& r);

}  // namespace stagelm::carbon
