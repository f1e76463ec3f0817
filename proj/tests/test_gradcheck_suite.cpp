#include <algorithm>
#include <set>

#include "doctest.h"
#include "ohf/gradcheck_suite.hpp"

TEST_CASE("gradcheck registry lists unique named checks including the composite layer") {
  auto names = ohf::gradcheck_names();
  CHECK(names.size() >= 20);
  std::set<std::string> uniq(names.begin(), names.end());
  CHECK(uniq.size() == names.size());
  for (const auto& n : names) CHECK(!n.empty());
  CHECK(std::find(names.begin(), names.end(), "full_layer") != names.end());
  CHECK(std::find(names.begin(), names.end(), "deform_branch") != names.end());
  CHECK(std::find(names.begin(), names.end(), "matmul") != names.end());
}

TEST_CASE("every registered check passes the 1e-4 relative-error bar") {
  for (const auto& name : ohf::gradcheck_names()) {
    INFO("op: ", name);
    double err = ohf::run_gradcheck(name, 1);
    CHECK(err < 1e-4);
    CHECK(std::isfinite(err));
  }
}

TEST_CASE("checks are reproducible and seed-sensitive where randomness enters") {
  CHECK(ohf::run_gradcheck("matmul", 7) == ohf::run_gradcheck("matmul", 7));
  // A different seed draws different operands; the bound still holds.
  CHECK(ohf::run_gradcheck("softmax", 1234) < 1e-4);
  CHECK(ohf::run_gradcheck("max_pool", 99) < 1e-4);
}

TEST_CASE("unknown check names are rejected as configuration errors") {
  try {
    ohf::run_gradcheck("definitely_not_an_op", 1);
    FAIL("expected a config error");
  } catch (const ohf::Error& e) {
    CHECK(e.kind() == ohf::ErrorKind::Config);
    CHECK(std::string(e.what()).find("unknown gradcheck") != std::string::npos);
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
}
