#include "mivpg/bagfile.hpp"

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>

namespace mivpg {

Bag read_bag(std::istream& in) {
  std::string magic, version;
  if (!(in >> magic >> version) || magic != "MIVPG-BAG" || version != "v1") {
    throw IoError("bag file: missing 'MIVPG-BAG v1' header");
  }
  std::string tag;
  std::size_t n = 0;
  if (!(in >> tag >> n) || tag != "N") throw IoError("bag file: expected 'N <count>'");
  if (n == 0) throw EmptyBagError("bag file: N must be >= 1");

  std::vector<TensorPtr> groups;
  for (std::size_t g = 0; g < n; ++g) {
    std::string ptag, dtag;
    std::size_t p = 0, d = 0;
    if (!(in >> ptag >> p >> dtag >> d) || ptag != "P" || dtag != "D") {
      throw IoError("bag file: expected 'P <patches> D <dim>' for image " +
                    std::to_string(g));
    }
    if (p == 0) throw EmptyBagError("bag file: image " + std::to_string(g) +
                                    " has no patches");
    if (d == 0) throw IoError("bag file: zero instance dimension");
    std::vector<double> values(p * d);
    for (std::size_t i = 0; i < p * d; ++i) {
      if (!(in >> values[i])) {
        throw IoError("bag file: truncated values in image " + std::to_string(g));
      }
    }
    groups.push_back(Tensor::from_values({p, d}, std::move(values)));
  }
  if (n == 1) return Bag::flat_bag(groups[0]);
  return Bag::hierarchical(std::move(groups));
}

Bag load_bag(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open bag file: " + path);
  return read_bag(in);
}

void write_bag(const Bag& bag, std::ostream& out) {
  bag.validate();
  out << "MIVPG-BAG v1\n";
  out << "N " << bag.groups.size() << "\n";
  char buf[40];
  for (const auto& g : bag.groups) {
    out << "P " << g->rows() << " D " << g->cols() << "\n";
    for (std::size_t i = 0; i < g->rows(); ++i) {
      for (std::size_t j = 0; j < g->cols(); ++j) {
        if (j) out << " ";
        std::snprintf(buf, sizeof(buf), "%.17g", g->at(i, j));
        out << buf;
      }
      out << "\n";
    }
  }
}

void save_bag(const Bag& bag, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_bag(bag, out);
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace mivpg
