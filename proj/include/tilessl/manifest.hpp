#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tilessl/error.hpp"
#include "tilessl/rng.hpp"

namespace tilessl {

// Manifest file layout (UTF-8, tab separated, one header line):
//   image_path <TAB> patient_id <TAB> label <TAB> view
// Relative image paths resolve against the manifest's directory.

enum class LabelScheme { binary, five_class };

inline constexpr std::array<std::string_view, 2> kBinaryLabels{"negative", "positive"};
inline constexpr std::array<std::string_view, 5> kFiveClassLabels{
    "background", "malignant_mass", "benign_mass", "malignant_calcification", "benign_calcification"};

inline std::size_t label_count(LabelScheme scheme) {
  return scheme == LabelScheme::binary ? kBinaryLabels.size() : kFiveClassLabels.size();
}

inline std::string_view label_name(LabelScheme scheme, int label) {
  if (scheme == LabelScheme::binary) return kBinaryLabels.at(static_cast<std::size_t>(label));
  return kFiveClassLabels.at(static_cast<std::size_t>(label));
}

struct ManifestEntry {
  std::string image_path;
  std::string patient_id;
  int label = 0;
  std::string view;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  LabelScheme scheme = LabelScheme::binary;
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

inline const char* kManifestHeader = "image_path\tpatient_id\tlabel\tview";

inline void write_manifest(const Manifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest: " + path);
  out << kManifestHeader << '\n';
  for (const auto& e : manifest.entries)
    out << e.image_path << '\t' << e.patient_id << '\t' << label_name(manifest.scheme, e.label) << '\t' << e.view
        << '\n';
  if (!out) throw DataError("failed writing manifest: " + path);
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, '\t')) fields.push_back(field);
  if (!line.empty() && line.back() == '\t') fields.emplace_back();
  return fields;
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest is empty (missing header): " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) throw DataError("manifest header mismatch in " + path);

  std::vector<std::array<std::string, 4>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 4)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected 4 fields, got " + std::to_string(fields.size()));
    if (fields[1].empty()) throw DataError(path + ":" + std::to_string(line_no) + ": empty patient_id");
    rows.push_back({fields[0], fields[1], fields[2], fields[3]});
  }

  const auto index_in = [](auto const& set, const std::string& label) -> int {
    const auto it = std::find(set.begin(), set.end(), label);
    return it == set.end() ? -1 : static_cast<int>(it - set.begin());
  };
  const bool all_binary = std::all_of(rows.begin(), rows.end(), [&](const auto& r) { return index_in(kBinaryLabels, r[2]) >= 0; });
  Manifest manifest;
  manifest.scheme = all_binary ? LabelScheme::binary : LabelScheme::five_class;
  for (const auto& r : rows) {
    const int label = all_binary ? index_in(kBinaryLabels, r[2]) : index_in(kFiveClassLabels, r[2]);
    if (label < 0) throw DataError("manifest " + path + ": label '" + r[2] + "' is not in the declared label set");
    manifest.entries.push_back({r[0], r[1], label, r[3]});
  }
  return manifest;
}

inline std::string resolve_path(const std::string& manifest_path, const std::string& image_path) {
  const std::filesystem::path p(image_path);
  if (p.is_absolute()) return image_path;
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

struct PatientSplit {
  Manifest train;
  Manifest val;
  Manifest test;
};

struct PatientGroup {
  std::string patient_id;
  int stratum = 0;
  std::vector<std::size_t> entries;
};

// Patients in first-appearance order. Stratum = majority image label, ties to the higher label.
inline std::vector<PatientGroup> group_patients(const Manifest& manifest) {
  std::vector<PatientGroup> groups;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& id = manifest.entries[i].patient_id;
    auto [it, inserted] = index.try_emplace(id, groups.size());
    if (inserted) groups.push_back({id, 0, {}});
    groups[it->second].entries.push_back(i);
  }
  for (auto& g : groups) {
    std::vector<std::size_t> counts(label_count(manifest.scheme), 0);
    for (auto i : g.entries) ++counts[static_cast<std::size_t>(manifest.entries[i].label)];
    std::size_t best = 0;
    for (std::size_t k = 1; k < counts.size(); ++k)
      if (counts[k] >= counts[best]) best = k;
    g.stratum = static_cast<int>(best);
  }
  return groups;
}

// Patient-level split stratified by patient label. Within each stratum the patient
// order is shuffled with the seed and split counts follow largest-remainder
// apportionment, with remainder ties going to the split furthest below its global target.
inline PatientSplit stratified_patient_split(const Manifest& manifest, const std::array<double, 3>& ratios,
                                             std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0.0; }))
    throw ConfigError("split ratios must be nonnegative and sum to 1");
  auto groups = group_patients(manifest);
  const auto nonzero = static_cast<std::size_t>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0.0; }));
  if (groups.size() < nonzero)
    throw DataError("fewer patients (" + std::to_string(groups.size()) + ") than splits (" + std::to_string(nonzero) + ")");

  std::array<double, 3> global_target{};
  for (int s = 0; s < 3; ++s) global_target[s] = ratios[s] * static_cast<double>(groups.size());
  std::array<std::size_t, 3> assigned{};

  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t g = 0; g < groups.size(); ++g) strata[groups[g].stratum].push_back(g);

  std::array<std::vector<std::size_t>, 3> chosen;
  for (auto& [stratum, members] : strata) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(stratum), 0x5b1d}));
    rng.shuffle(std::span<std::size_t>(members));
    const double n = static_cast<double>(members.size());
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> frac{};
    std::size_t used = 0;
    for (int s = 0; s < 3; ++s) {
      const double exact = ratios[s] * n;
      counts[s] = static_cast<std::size_t>(std::floor(exact + 1e-12));
      frac[s] = exact - static_cast<double>(counts[s]);
      used += counts[s];
    }
    for (std::size_t left = members.size() - used; left > 0; --left) {
      int best = -1;
      for (int s = 0; s < 3; ++s) {
        if (ratios[s] <= 0.0) continue;
        if (best < 0) {
          best = s;
          continue;
        }
        const double deficit_s = global_target[s] - static_cast<double>(assigned[s] + counts[s]);
        const double deficit_b = global_target[best] - static_cast<double>(assigned[best] + counts[best]);
        if (frac[s] > frac[best] + 1e-12 || (std::abs(frac[s] - frac[best]) <= 1e-12 && deficit_s > deficit_b + 1e-12))
          best = s;
      }
      ++counts[best];
      frac[best] = -1.0;
    }
    std::size_t cursor = 0;
    for (int s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < counts[s]; ++k) chosen[s].push_back(members[cursor++]);
      assigned[s] += counts[s];
    }
  }

  PatientSplit split;
  split.train.scheme = split.val.scheme = split.test.scheme = manifest.scheme;
  std::array<Manifest*, 3> outs{&split.train, &split.val, &split.test};
  for (int s = 0; s < 3; ++s) {
    std::sort(chosen[s].begin(), chosen[s].end());
    for (auto g : chosen[s])
      for (auto i : groups[g].entries) outs[s]->entries.push_back(manifest.entries[i]);
  }
  return split;
}

}  // namespace tilessl
