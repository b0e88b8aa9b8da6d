#pragma once

#include <map>
#include <string>
#include <vector>

#include "subseg/net.hpp"

namespace subseg {

struct NamedArray {
    std::vector<int> shape;
    std::vector<double> data;
};

// sorted by name; map order is the on-disk entry order, making writes canonical
using ArrayMap = std::map<std::string, NamedArray>;

// Container layout: magic "BASC", version u32 LE, entry count u32 LE, then per
// entry: name length u32, UTF-8 name, rank u32, extents u32 each, payload as
// little-endian f64.
void write_checkpoint(const std::string& path, const ArrayMap& entries);
ArrayMap read_checkpoint(const std::string& path);

// name prefixes: "student/", "teacher/" (weights + "stats/.../{mean,var,count}"),
// "meta/step"
ArrayMap pack_model(const ModelState& state);
ModelState unpack_model(const ArrayMap& entries, const NetConfig& config);

void pack_params(const Params& p, const std::string& prefix, ArrayMap& into);
void unpack_params(const ArrayMap& entries, const std::string& prefix, Params& into);

}  // namespace subseg
