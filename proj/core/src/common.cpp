#include "scn/common.hpp"

#include <cmath>
#include <cstdlib>

namespace scn {

Ratio::Ratio(int n, int d) : num(n), den(d) {
  if (n <= 0 || d <= 0 || n >= d) {
    throw ConfigError("ratio must lie in (0,1): " + std::to_string(n) + "/" +
                      std::to_string(d));
  }
  int g = std::gcd(n, d);
  num = n / g;
  den = d / g;
}

Ratio Ratio::parse(const std::string& text) {
  auto slash = text.find('/');
  try {
    if (slash != std::string::npos) {
      int n = std::stoi(text.substr(0, slash));
      int d = std::stoi(text.substr(slash + 1));
      return Ratio(n, d);
    }
    // Decimal form: keep it exact by scaling the written digits.
    auto dot = text.find('.');
    if (dot == std::string::npos) {
      throw ConfigError("ratio must be fractional: " + text);
    }
    std::string digits = text.substr(0, dot) + text.substr(dot + 1);
    int frac_len = static_cast<int>(text.size() - dot - 1);
    if (frac_len <= 0 || frac_len > 6) {
      throw ConfigError("unparsable ratio: " + text);
    }
    long long den = 1;
    for (int i = 0; i < frac_len; ++i) den *= 10;
    long long num = std::stoll(digits);
    return Ratio(static_cast<int>(num), static_cast<int>(den));
  } catch (const std::invalid_argument&) {
    throw ConfigError("unparsable ratio: " + text);
  } catch (const std::out_of_range&) {
    throw ConfigError("unparsable ratio: " + text);
  }
}

int Ratio::stride() const {
  if (!integer_stride()) {
    throw ConfigError("ratio " + str() + " has non-integer stride");
  }
  return den;
}

int Ratio::scale_down(int size) const {
  // round half away from zero, computed in integers
  long long t = 2ll * size * num + den;
  int v = static_cast<int>(t / (2ll * den));
  return v < 1 ? 1 : v;
}

std::string Ratio::str() const {
  return std::to_string(num) + "/" + std::to_string(den);
}

}  // namespace scn
