#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <system_error>

#include "recourse/data.hpp"

namespace recourse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

double json_number(const json& j, const std::string& what) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!j.is_number()) throw DataError(what + " is not a number");
  return j.get<double>();
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view text) {
  text = trim(text);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  double value = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw DataError("not a number: '" + std::string(text) + "'");
  return value;
}

IdDictionary IdDictionary::from_names(std::vector<std::string> names) {
  IdDictionary dict;
  for (auto& n : names) {
    if (dict.find(n)) throw DataError("duplicate id '" + n + "'");
    dict.intern(n);
  }
  return dict;
}

std::size_t IdDictionary::intern(const std::string& name) {
  const auto [it, inserted] = index_.try_emplace(name, names_.size());
  if (inserted) names_.push_back(name);
  return it->second;
}

std::optional<std::size_t> IdDictionary::find(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t IdDictionary::at(std::string_view name) const {
  if (auto idx = find(name)) return *idx;
  throw DataError("unknown id '" + std::string(name) + "'");
}

RatingsTable parse_ratings(std::istream& in, const IdDictionary* items, IdDictionary users) {
  RatingsTable table;
  table.users = std::move(users);
  if (items) table.items = *items;
  std::vector<std::vector<Rating<double>>> per_user(table.users.size());

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto content = trim(line);
    if (content.empty()) continue;
    if (line_no == 1 && content == "user_id,item_id,rating") continue;
    const auto fields = split_csv(content);
    const auto where = "ratings line " + std::to_string(line_no);
    if (fields.size() != 3) throw DataError(where + ": expected 3 fields, got " + std::to_string(fields.size()));
    if (fields[0].empty() || fields[1].empty()) throw DataError(where + ": empty id");
    double value = 0;
    try {
      value = parse_double(fields[2]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!std::isfinite(value)) throw DataError(where + ": non-finite rating");
    std::size_t item = 0;
    if (items) {
      const auto found = table.items.find(fields[1]);
      if (!found) throw DataError(where + ": unknown item '" + std::string(fields[1]) + "'");
      item = *found;
    } else {
      item = table.items.intern(std::string(fields[1]));
    }
    const auto user = table.users.intern(std::string(fields[0]));
    if (user >= per_user.size()) per_user.resize(user + 1);
    for (const auto& r : per_user[user])
      if (r.item == item)
        throw DataError(where + ": duplicate rating for (" + std::string(fields[0]) + ", " +
                        std::string(fields[1]) + ")");
    per_user[user].push_back({item, value});
  }
  per_user.resize(table.users.size());
  table.store = Ratings(std::move(per_user));
  return table;
}

RatingsTable load_ratings(const fs::path& path, const IdDictionary* items, IdDictionary users) {
  auto in = open_input(path);
  return parse_ratings(in, items, std::move(users));
}

void save_ratings(const fs::path& path, const Ratings& ratings, const IdDictionary& users,
                  const IdDictionary& items) {
  auto out = open_output(path);
  out << "user_id,item_id,rating\n";
  for (UserId u = 0; u < ratings.num_users(); ++u)
    for (const auto& r : ratings.ratings(u))
      out << users.name(u) << ',' << items.name(r.item) << ',' << format_double(r.value) << '\n';
}

std::vector<RawItemRecord> parse_item_records(std::istream& in) {
  std::vector<RawItemRecord> records;
  IdDictionary seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto where = "items line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id")) throw DataError(where + ": record needs an 'id'");
    RawItemRecord rec;
    const auto& id = j["id"];
    if (id.is_string())
      rec.external_id = id.get<std::string>();
    else if (id.is_number_integer())
      rec.external_id = std::to_string(id.get<long long>());
    else
      throw DataError(where + ": 'id' must be a string or integer");
    if (seen.find(rec.external_id)) throw DataError(where + ": duplicate item id '" + rec.external_id + "'");
    seen.intern(rec.external_id);

    auto read_strings = [&](const char* key, std::map<std::string, std::string>& dst) {
      if (!j.contains(key)) return;
      if (!j[key].is_object()) throw DataError(where + ": '" + key + "' must be an object");
      for (const auto& [name, value] : j[key].items()) {
        if (!value.is_string()) throw DataError(where + ": field '" + name + "' must be a string");
        dst[name] = value.get<std::string>();
      }
    };
    read_strings("text", rec.text_fields);
    read_strings("categorical", rec.categorical_fields);
    if (j.contains("numeric")) {
      if (!j["numeric"].is_object()) throw DataError(where + ": 'numeric' must be an object");
      for (const auto& [name, value] : j["numeric"].items()) {
        if (!value.is_number()) throw DataError(where + ": field '" + name + "' must be a number");
        rec.numeric_fields[name] = value.get<double>();
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<RawItemRecord> load_item_records(const fs::path& path) {
  auto in = open_input(path);
  return parse_item_records(in);
}

void save_catalog(const fs::path& dir, const FeaturizedCatalog& fc) {
  fs::create_directories(dir);
  const auto& cat = fc.catalog;
  {
    auto out = open_output(dir / "catalog.csv");
    out << "f=" << cat.num_features() << '\n';
    for (Eigen::Index r = 0; r < cat.num_items(); ++r)
      for (Catalog::SparseRows::InnerIterator it(cat.features(), r); it; ++it)
        if (it.value() != 0.0) out << r << ',' << it.col() << ',' << format_double(it.value()) << '\n';
  }
  json side;
  side["num_items"] = cat.num_items();
  side["num_features"] = cat.num_features();
  side["item_ids"] = fc.items.names();
  json features = json::array();
  for (const auto& f : fc.features) features.push_back({{"name", f.name}, {"source", f.source_field}});
  side["features"] = features;
  side["mutable"] = cat.mutable_mask();
  if (const auto& b = cat.bounds()) {
    auto encode = [](const Eigen::VectorXd& v) {
      json arr = json::array();
      for (Eigen::Index i = 0; i < v.size(); ++i)
        arr.push_back(std::isfinite(v[i]) ? json(v[i]) : json(nullptr));
      return arr;
    };
    side["bounds"] = {{"lo", encode(b->lo)}, {"hi", encode(b->hi)}};
  } else {
    side["bounds"] = nullptr;
  }
  auto out = open_output(dir / "catalog.json");
  out << side.dump(2) << '\n';
}

FeaturizedCatalog load_catalog(const fs::path& dir) {
  json side;
  {
    auto in = open_input(dir / "catalog.json");
    try {
      in >> side;
    } catch (const json::exception& e) {
      throw DataError("catalog.json: " + std::string(e.what()));
    }
  }
  FeaturizedCatalog fc;
  Eigen::Index n_items = 0, f = 0;
  std::vector<bool> mask;
  try {
    n_items = side.at("num_items").get<Eigen::Index>();
    f = side.at("num_features").get<Eigen::Index>();
    fc.items = IdDictionary::from_names(side.at("item_ids").get<std::vector<std::string>>());
    for (const auto& feat : side.at("features"))
      fc.features.push_back({feat.at("name").get<std::string>(), feat.at("source").get<std::string>()});
    mask = side.at("mutable").get<std::vector<bool>>();
  } catch (const json::exception& e) {
    throw DataError("catalog.json: " + std::string(e.what()));
  }
  if (static_cast<Eigen::Index>(fc.items.size()) != n_items) throw DataError("catalog.json: item_ids length mismatch");
  if (static_cast<Eigen::Index>(fc.features.size()) != f) throw DataError("catalog.json: features length mismatch");

  std::optional<FeatureBounds<double>> bounds;
  if (side.contains("bounds") && !side["bounds"].is_null()) {
    auto decode = [&](const json& arr, double missing) {
      if (!arr.is_array() || static_cast<Eigen::Index>(arr.size()) != f)
        throw DataError("catalog.json: bounds length mismatch");
      Eigen::VectorXd v(f);
      for (Eigen::Index i = 0; i < f; ++i) {
        const double x = json_number(arr[static_cast<std::size_t>(i)], "bound");
        v[i] = std::isnan(x) ? missing : x;
      }
      return v;
    };
    constexpr double inf = std::numeric_limits<double>::infinity();
    bounds = FeatureBounds<double>{decode(side["bounds"].at("lo"), -inf), decode(side["bounds"].at("hi"), inf)};
  }

  auto in = open_input(dir / "catalog.csv");
  std::string line;
  if (!std::getline(in, line) || trim(line).substr(0, 2) != "f=") throw DataError("catalog.csv: missing f= header");
  if (static_cast<Eigen::Index>(parse_double(trim(line).substr(2))) != f)
    throw DataError("catalog.csv: f disagrees with catalog.json");
  std::vector<Eigen::Triplet<double>> triplets;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv(trim(line));
    const auto where = "catalog.csv line " + std::to_string(line_no);
    if (fields.size() != 3) throw DataError(where + ": expected 3 fields");
    try {
      const double r = parse_double(fields[0]);
      const double c = parse_double(fields[1]);
      if (r < 0 || c < 0 || r >= static_cast<double>(n_items) || c >= static_cast<double>(f) ||
          r != std::floor(r) || c != std::floor(c))
        throw DataError("index out of range");
      triplets.emplace_back(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c), parse_double(fields[2]));
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  Catalog::SparseRows features(n_items, f);
  features.setFromTriplets(triplets.begin(), triplets.end());
  fc.catalog = Catalog(std::move(features), std::move(mask), std::move(bounds));
  return fc;
}

void save_dataset(const fs::path& dir, const Dataset& data) {
  save_catalog(dir, data.items);
  save_ratings(dir / "ratings.csv", data.ratings, data.users, data.items.items);
  if (data.metadata.empty()) return;
  std::vector<std::string> fields;
  for (const auto& m : data.metadata)
    for (const auto& [k, v] : m)
      if (std::find(fields.begin(), fields.end(), k) == fields.end()) fields.push_back(k);
  std::sort(fields.begin(), fields.end());
  auto out = open_output(dir / "users.csv");
  out << "user_id";
  for (const auto& k : fields) out << ',' << k;
  out << '\n';
  for (UserId u = 0; u < data.metadata.size(); ++u) {
    out << data.users.name(u);
    for (const auto& k : fields) {
      out << ',';
      const auto it = data.metadata[u].find(k);
      if (it != data.metadata[u].end()) out << format_double(it->second);
    }
    out << '\n';
  }
}

Dataset load_dataset(const fs::path& dir) {
  Dataset data;
  data.items = load_catalog(dir);
  IdDictionary users;
  UserMetadata metadata;
  if (fs::exists(dir / "users.csv")) {
    auto in = open_input(dir / "users.csv");
    std::string line;
    std::getline(in, line);
    const auto header = split_csv(trim(line));
    if (header.empty() || header[0] != "user_id") throw DataError("users.csv: header must start with user_id");
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      const auto fields = split_csv(trim(line));
      const auto where = "users.csv line " + std::to_string(line_no);
      if (fields.size() != header.size()) throw DataError(where + ": wrong field count");
      if (users.find(fields[0])) throw DataError(where + ": duplicate user '" + std::string(fields[0]) + "'");
      users.intern(std::string(fields[0]));
      std::map<std::string, double> m;
      for (std::size_t i = 1; i < fields.size(); ++i) {
        if (fields[i].empty()) continue;
        try {
          m[std::string(header[i])] = parse_double(fields[i]);
        } catch (const DataError& e) {
          throw DataError(where + ": " + e.what());
        }
      }
      metadata.push_back(std::move(m));
    }
  }
  auto table = load_ratings(dir / "ratings.csv", &data.items.items, std::move(users));
  data.ratings = std::move(table.store);
  data.users = std::move(table.users);
  if (!metadata.empty()) {
    metadata.resize(data.users.size());
    data.metadata = std::move(metadata);
  }
  return data;
}

}  // namespace recourse
