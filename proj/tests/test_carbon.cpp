#include <catch_amalgamated.hpp>

#include "stagelm/carbon.hpp"
#include "stagelm/error.hpp"

using namespace stagelm;
using namespace stagelm::carbon;

TEST_CASE("reference inputs") {
  const auto r = estimate({270336, 192, 1.10, 0.079});
  CHECK(r.mwh == Catch::Approx(270336.0 * 192 * 1.10 / 1e6).epsilon(1e-15));
  CHECK(r.tco2eq == Catch::Approx(r.mwh * 0.079).epsilon(1e-15));
  CHECK(format_report(r) == "57.1 MWh, 4.51 tCO2eq");
  CHECK(format_sig(r.mwh, 2) == "57");
  CHECK(format_sig(r.tco2eq, 2) == "4.5");
}

TEST_CASE("degenerate inputs and linearity") {
  const auto z = estimate({0, 192, 1.1, 0.079});
  CHECK(z.mwh == 0.0);
  CHECK(z.tco2eq == 0.0);
  CHECK(estimate({100, 192, 1.1, 0}).tco2eq == 0.0);
  const auto a = estimate({100, 250, 1.2, 0.3});
  const auto b = estimate({300, 250, 1.2, 0.3});
  CHECK(b.mwh == Catch::Approx(3 * a.mwh));
  CHECK(estimate({100, 250, 1.2, 0.6}).tco2eq == Catch::Approx(2 * a.tco2eq));
}

TEST_CASE("validation") {
  CHECK_THROWS_AS(estimate({1, 1, 0.99, 0.1}), Error);
  CHECK_THROWS_AS(estimate({-1, 1, 1.1, 0.1}), Error);
  CHECK_THROWS_AS(estimate({1, 0, 1.1, 0.1}), Error);
  CHECK_THROWS_AS(estimate({1, 1, 1.1, -0.1}), Error);
  CHECK_NOTHROW(estimate({1, 1, 1.0, 0.1}));
}

TEST_CASE("formatting") {
  CHECK(format_sig(0.0, 3) == "0");
  CHECK(format_sig(1234.5, 3) == "1230");
  CHECK(format_sig(9.996, 3) == "10.0");
  CHECK(format_sig(0.012345, 3) == "0.0123");
  CHECK(csv_header() == "device_hours,device_power_w,pue,carbon_intensity,mwh,tco2eq");
  CHECK(csv_row(estimate({1, 1e6, 1, 1})) == "1,1000000,1,1,1,1");
}
