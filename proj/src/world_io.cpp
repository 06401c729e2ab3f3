#include "moppr/world_io.hpp"

#include <fstream>
#include <sstream>

#include "moppr/config.hpp"

namespace moppr {

using nlohmann::json;

namespace {

template <class Fn>
void for_each_line(const std::filesystem::path& path, Fn fn) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    fn(json::parse(line));
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

json page_view_to_json(const PageView& pv) {
  json imps = json::array();
  for (const Impression& i : pv.impressions)
    imps.push_back({{"item", i.item}, {"click", i.clicked}, {"purchase", i.purchased}, {"rel", i.relevant}});
  json under = json::array();
  for (const UnderImpression& u : pv.under_impressions) under.push_back({{"item", u.item}, {"rel", u.relevant}});
  return {{"user_id", pv.user_id}, {"query_id", pv.query_id}, {"ts", pv.ts}, {"impressions", imps}, {"under", under}};
}

PageView page_view_from_json(const json& j) {
  PageView pv;
  pv.user_id = j.at("user_id").get<UserId>();
  pv.query_id = j.at("query_id").get<QueryId>();
  pv.ts = j.at("ts").get<double>();
  for (const json& i : j.at("impressions"))
    pv.impressions.push_back({i.at("item").get<ItemId>(), i.at("click").get<bool>(), i.at("purchase").get<bool>(),
                              i.at("rel").get<bool>()});
  for (const json& u : j.at("under")) pv.under_impressions.push_back({u.at("item").get<ItemId>(), u.at("rel").get<bool>()});
  return pv;
}

void write_page_log(const std::filesystem::path& path, std::span<const PageView> pages) {
  auto out = open_out(path);
  for (const PageView& pv : pages) out << page_view_to_json(pv).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<PageView> read_page_log(const std::filesystem::path& path, int page_size_N) {
  std::vector<PageView> pages;
  for_each_line(path, [&](const json& j) {
    PageView pv = page_view_from_json(j);
    pv.short_page = page_size_N > 0 && static_cast<int>(pv.impressions.size()) < page_size_N;
    pages.push_back(std::move(pv));
  });
  return pages;
}

void save_world(const World& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest = {{"format", "moppr-world"},
                   {"version", 1},
                   {"config", world.config},
                   {"seed", world.config.seed},
                   {"counts",
                    {{"items", world.items.size()}, {"users", world.users.size()}, {"queries", world.queries.size()}}}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  {
    auto out = open_out(dir / "items.jsonl");
    for (const CatalogItem& it : world.items) {
      json j = {{"id", it.id},       {"category", it.category}, {"latent", it.latent},
                {"price", it.price}, {"title", it.title_terms}, {"brand", it.brand},
                {"seller", it.seller}, {"stats", it.stats}};
      out << j.dump() << '\n';
    }
  }
  {
    auto out = open_out(dir / "users.jsonl");
    for (const SynthUser& u : world.users) {
      json hist = json::array();
      for (const BehaviorEvent& ev : u.history)
        hist.push_back({{"item", ev.item}, {"type", static_cast<int>(ev.type)}, {"day", ev.day}});
      json j = {{"id", u.id},
                {"profile",
                 {{"age", u.profile.age_band}, {"gender", u.profile.gender_band}, {"power", u.profile.power_level}}},
                {"latent", u.latent},
                {"history", hist}};
      out << j.dump() << '\n';
    }
  }
  {
    auto out = open_out(dir / "queries.jsonl");
    for (const SynthQuery& q : world.queries) {
      json j = {{"id", q.id},         {"terms", q.terms},           {"relevant_categories", q.relevant_categories},
                {"latent", q.latent}, {"popularity", q.popularity}, {"freq_bucket", q.freq_bucket}};
      out << j.dump() << '\n';
    }
  }
}

World load_world(const std::filesystem::path& dir) {
  const json manifest = json::parse(read_text_file(dir / "manifest.json"));
  World world;
  world.config = manifest.at("config").get<WorldConfig>();
  for_each_line(dir / "items.jsonl", [&](const json& j) {
    CatalogItem it;
    it.id = j.at("id").get<ItemId>();
    it.category = j.at("category").get<CategoryId>();
    it.latent = j.at("latent").get<std::vector<double>>();
    it.price = j.at("price").get<double>();
    it.title_terms = j.at("title").get<std::vector<TermId>>();
    it.brand = j.at("brand").get<std::int32_t>();
    it.seller = j.at("seller").get<std::int32_t>();
    it.stats = j.at("stats").get<std::array<float, kItemStats>>();
    if (it.id != static_cast<ItemId>(world.items.size())) throw DataIntegrity("items.jsonl: ids must be dense and ordered");
    world.items.push_back(std::move(it));
  });
  for_each_line(dir / "users.jsonl", [&](const json& j) {
    SynthUser u;
    u.id = j.at("id").get<UserId>();
    const json& p = j.at("profile");
    u.profile = {p.at("age").get<int>(), p.at("gender").get<int>(), p.at("power").get<int>()};
    u.latent = j.at("latent").get<std::vector<double>>();
    for (const json& ev : j.at("history"))
      u.history.push_back({ev.at("item").get<ItemId>(), static_cast<BehaviorType>(ev.at("type").get<int>()),
                           ev.at("day").get<double>()});
    if (u.id != static_cast<UserId>(world.users.size())) throw DataIntegrity("users.jsonl: ids must be dense and ordered");
    world.users.push_back(std::move(u));
  });
  for_each_line(dir / "queries.jsonl", [&](const json& j) {
    SynthQuery q;
    q.id = j.at("id").get<QueryId>();
    q.terms = j.at("terms").get<std::vector<TermId>>();
    q.relevant_categories = j.at("relevant_categories").get<std::vector<CategoryId>>();
    q.latent = j.at("latent").get<std::vector<double>>();
    q.popularity = j.at("popularity").get<double>();
    q.freq_bucket = j.at("freq_bucket").get<int>();
    if (q.id != static_cast<QueryId>(world.queries.size()))
      throw DataIntegrity("queries.jsonl: ids must be dense and ordered");
    world.queries.push_back(std::move(q));
  });
  world.finalize();
  return world;
}

}  // namespace moppr
