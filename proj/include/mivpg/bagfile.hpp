#pragma once

#include <iosfwd>
#include <string>

#include "mivpg/mivpg.hpp"

namespace mivpg {

// Plain-text bag container.
//
//   MIVPG-BAG v1
//   N <images>
//   P <patches> D <dim>
//   <patches lines of dim space-separated decimal floats>
//   ... repeated per image
//
// Flat bags use N=1 and their rows are the instances.
Bag read_bag(std::istream& in);
Bag load_bag(const std::string& path);
void write_bag(const Bag& bag, std::ostream& out);
void save_bag(const Bag& bag, const std::string& path);

}  // namespace mivpg
