#include "mivpg/attn_export.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace mivpg {

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  return out;
}

}  // namespace

std::vector<std::string> export_attention(const Bag& bag, const MivpgConfig& config,
                                          const MivpgParams& params,
                                          const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  Tape tape;
  tape.enabled = false;
  auto [q, diag] = mivpg_forward(tape, bag, config, params);
  (void)q;

  std::vector<std::string> written;

  for (std::size_t b = 0; b < diag.cross_maps.size(); ++b) {
    const auto& map = diag.cross_maps[b];
    const std::string path = out_dir + "/cross_attention_block" +
                             std::to_string(diag.cross_blocks[b]) + ".csv";
    auto out = open_out(path);
    out << "head,query";
    for (std::size_t j = 0; j < map.keys(); ++j) out << ",w" << j;
    out << "\n";
    for (std::size_t h = 0; h < map.heads(); ++h) {
      for (std::size_t i = 0; i < map.queries(); ++i) {
        out << h << "," << i;
        for (std::size_t j = 0; j < map.keys(); ++j) {
          out << "," << format_double(map.at(h, i, j));
        }
        out << "\n";
      }
    }
    if (!out) throw IoError("write failed: " + path);
    written.push_back(path);
  }

  if (!bag.flat) {
    for (std::size_t img = 0; img < diag.image_alphas.size(); ++img) {
      const auto& alpha = diag.image_alphas[img];
      const std::string path =
          out_dir + "/patch_weights_image" + std::to_string(img) + ".csv";
      auto out = open_out(path);
      for (std::size_t p = 0; p < alpha.size(); ++p) {
        if (p) out << ",";
        out << "alpha" << p;
      }
      out << "\n";
      for (std::size_t p = 0; p < alpha.size(); ++p) {
        if (p) out << ",";
        out << format_double(alpha[p]);
      }
      out << "\n";
      if (!out) throw IoError("write failed: " + path);
      written.push_back(path);
    }
  }

  return written;
}

}  // namespace mivpg
