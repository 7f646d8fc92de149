#include "tsrq/schedule.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>

#include "tsrq/errors.hpp"

namespace tsrq {

std::vector<double> make_exponential_schedule(int iters, double temperature) {
  if (iters < 0) throw ArgumentError("schedule: iteration count must be >= 0");
  if (!(temperature > 0.0)) {
    throw ArgumentError("schedule: temperature must be positive");
  }
  std::vector<double> pcts(static_cast<size_t>(iters));
  for (int k = 1; k <= iters; ++k) {
    pcts[static_cast<size_t>(k - 1)] =
        100.0 * (1.0 - std::exp(-temperature * k / iters));
  }
  return pcts;
}

std::vector<double> make_handcrafted_schedule(
    const std::vector<double>& pcts) {
  if (pcts.empty()) throw ArgumentError("schedule: empty percentage list");
  double prev = 0.0;
  for (double p : pcts) {
    if (!(p >= 0.0) || p > 100.0) {
      throw ArgumentError("schedule: percentages must lie in [0,100]");
    }
    if (p < prev) {
      throw ArgumentError("schedule: percentages must be non-decreasing");
    }
    prev = p;
  }
  return pcts;
}

namespace {

double parse_double(const std::string& s, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') {
    throw ArgumentError(std::string("schedule: bad number for ") + what +
                        ": '" + s + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(item);
  return parts;
}

}  // namespace

std::vector<double> parse_schedule(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw ArgumentError("schedule: expected 'exp:...' or 'list:...', got '" +
                        text + "'");
  }
  const std::string kind = text.substr(0, colon);
  const std::string body = text.substr(colon + 1);
  if (kind == "exp") {
    double temperature = -1.0;
    int iters = -1;
    for (const auto& part : split(body, ',')) {
      const auto eq = part.find('=');
      if (eq == std::string::npos) {
        throw ArgumentError("schedule: expected key=value in '" + part + "'");
      }
      const std::string key = part.substr(0, eq);
      const std::string val = part.substr(eq + 1);
      if (key == "t") {
        temperature = parse_double(val, "t");
      } else if (key == "K") {
        const double k = parse_double(val, "K");
        iters = static_cast<int>(k);
        if (k != iters || iters < 1) {
          throw ArgumentError("schedule: K must be a positive integer");
        }
      } else {
        throw ArgumentError("schedule: unknown key '" + key + "'");
      }
    }
    if (temperature < 0.0 || iters < 0) {
      throw ArgumentError("schedule: exp form needs both t and K");
    }
    return make_exponential_schedule(iters, temperature);
  }
  if (kind == "list") {
    std::vector<double> pcts;
    for (const auto& part : split(body, ',')) {
      pcts.push_back(parse_double(part, "list entry"));
    }
    return make_handcrafted_schedule(pcts);
  }
  throw ArgumentError("schedule: unknown kind '" + kind + "'");
}

}  // namespace tsrq
