#include "stagelm/carbon.hpp"

#include <cmath>
#include <algorithm>
#include <cstdio>

#include "stagelm/error.hpp"

namespace stagelm::carbon {

void CarbonInput::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidArgument, "carbon", m); };
  if (!(device_hours >= 0)) bad("device_hours must be non-negative");
  if (!(device_power_w > 0)) bad("device_power_w must be positive");
  if (!(pue >= 1.0)) bad("pue must be at least 1.0");
  if (!(carbon_intensity >= 0)) bad("carbon_intensity must be non-negative");
}

CarbonReport estimate(const CarbonInput& in) {
  in.validate();
  CarbonReport r;
  r.inputs = in;
  r.mwh = in.device_hours * in.device_power_w * in.pue / 1e6;
  r.tco2eq = r.mwh * in.carbon_intensity;
  return r;
}

std::string format_sig(double v, int digits) {
  if (v == 0) return "0";
  int magnitude = static_cast<int>(std::floor(std::log10(std::abs(v))));
  const double unit = std::pow(10.0, magnitude - digits + 1);
  const double rounded = std::round(v / unit) * unit;
  magnitude = static_cast<int>(std::floor(std::log10(std::abs(rounded))));
  const int decimals = std::max(0, digits - 1 - magnitude);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, rounded);
  return buf;
}

std::string format_report(const CarbonReport& r, int digits) {
  return format_sig(r.mwh, digits) + " MWh, " + format_sig(r.tco2eq, digits) + " tCO2eq";
}

std::string csv_header() { return "device_hours,device_power_w,pue,carbon_intensity,mwh,tco2eq"; }

std::string csv_row(const CarbonReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.inputs.device_hours, r.inputs.device_power_w,
                r.inputs.pue, r.inputs.carbon_intensity, r.mwh, r.tco2eq);
  return buf;
}

}  // namespace stagelm::carbon
