#include <doctest.h>

#include <httplib.h>

#include <regex>
#include <random>
#include <thread>

#include <nlohmann/json.hpp>

#include "refcut/session_service.hpp"

using namespace refcut;
using nlohmann::json;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.decoder_dim = 4;
  c.click_radius = 2;
  return c;
}

std::shared_ptr<const RefCutNet<float>> tiny_net() {
  const ModelConfig cfg = tiny();
  return std::make_shared<const RefCutNet<float>>(cfg, init_params<float>(cfg, 21));
}

Image test_image(int h, int w, std::uint64_t seed) {
  Image im(h, w);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  for (float& v : im.data) v = static_cast<float>(u(rng)) / 255.0f;
  return im;
}

BitMask block(int h, int w, int r0, int c0, int r1, int c1) {
  BitMask m(h, w);
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) m.set(r, c);
  return m;
}

ReferenceGuidance guidance() {
  ReferenceGuidance g;
  g.image = test_image(20, 20, 3);
  g.positive = block(20, 20, 2, 2, 10, 12);
  g.negative = block(20, 20, 12, 0, 20, 20);
  return g;
}

int status_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status();
  }
  return 0;
}

}  // namespace

TEST_CASE("base64") {
  const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 255, 'a', 'b'};
  CHECK(base64_encode(bytes) == "AAEC+v9hYg==");
  CHECK(base64_decode("AAEC+v9hYg==") == bytes);
  CHECK(base64_decode(base64_encode({})).empty());
  CHECK_THROWS(base64_decode("@@@"));
}

TEST_CASE("session lifecycle in the store") {
  ServiceConfig cfg;
  cfg.max_sessions = 2;
  cfg.max_pixels = 40 * 40;
  SessionStore store(tiny_net(), cfg);

  const std::string a = store.create(test_image(24, 20, 1));
  const std::string b = store.create(test_image(24, 20, 1));
  CHECK(std::regex_match(a, std::regex("[0-9a-f]{32}")));
  CHECK(a != b);
  CHECK(status_of([&] { store.create(test_image(8, 8, 1)); }) == 503);
  store.remove(b);
  try {
    store.create(test_image(41, 40, 1));
    FAIL("oversized image accepted");
  } catch (const ServiceError& e) {
    CHECK(e.status() == 413);
    CHECK(std::string(e.what()).find("1600") != std::string::npos);
  }

  const ClickResult first = store.add_click(a, 12, 10, Polarity::Positive);
  CHECK(first.mask.height() == 24);
  CHECK(first.mask.width() == 20);
  CHECK(maskops::rle_decode(maskops::rle_encode(first.mask)) == first.mask);
  CHECK(first.clicks == 1);
  CHECK(first.prompts == "none");
  CHECK(status_of([&] { store.add_click(a, 24, 0, Polarity::Positive); }) == 400);

  const ClickResult second = store.add_click(a, 2, 2, Polarity::Negative);
  CHECK(second.clicks == 2);
  const UndoResult u1 = store.undo(a);
  CHECK(u1.undone);
  CHECK(u1.clicks == 1);
  CHECK(u1.mask == first.mask);
  CHECK(store.add_click(a, 2, 2, Polarity::Negative).mask == second.mask);
  store.undo(a);
  store.undo(a);
  const UndoResult none = store.undo(a);
  CHECK(!none.undone);
  CHECK(none.clicks == 0);

  store.remove(a);
  CHECK(status_of([&] { store.add_click(a, 1, 1, Polarity::Positive); }) == 404);
  CHECK(status_of([&] { store.undo(a); }) == 404);
  CHECK(status_of([&] { store.remove(a); }) == 404);
}

TEST_CASE("references, labels and reset") {
  SessionStore store(tiny_net(), {});
  const Image im = test_image(20, 20, 5);
  const ReferenceGuidance g = guidance();

  // prompts match a fresh computation
  const std::string s = store.create(im);
  store.set_reference(s, g);
  const auto fresh = generate_prompts(store.net(), resize_guidance(g, 16));
  CHECK(store.prompts(s).positive == fresh.positive);
  CHECK(store.prompts(s).negative == fresh.negative);
  CHECK(store.add_click(s, 6, 6, Polarity::Positive).prompts == "both");

  // reset then click == fresh session with the same guidance then click
  store.add_click(s, 15, 15, Polarity::Negative);
  store.reset(s);
  const ClickResult after_reset = store.add_click(s, 8, 9, Polarity::Positive);
  const std::string t = store.create(im);
  store.set_reference(t, g);
  CHECK(store.add_click(t, 8, 9, Polarity::Positive).mask == after_reset.mask);

  // empty masks behave like no reference
  const std::string plain = store.create(im);
  const std::string empty = store.create(im);
  ReferenceGuidance blank;
  blank.image = g.image;
  store.set_reference(empty, blank);
  CHECK(store.add_click(empty, 8, 9, Polarity::Positive).mask == store.add_click(plain, 8, 9, Polarity::Positive).mask);

  // pos-only accepted, latest reference wins
  ReferenceGuidance pos = g;
  pos.negative = BitMask();
  store.set_reference(t, pos);
  CHECK(store.add_click(t, 3, 3, Polarity::Positive).prompts == "pos");
  CHECK(store.prompts(t).negative == std::vector<float>(8, 0.0f));

  // labels keep their own prompts
  store.set_reference(t, g, "cup");
  CHECK(store.add_click(t, 4, 4, Polarity::Positive, "cup").prompts == "both");
  CHECK(store.add_click(t, 5, 5, Polarity::Positive).prompts == "both");  // stays on the active label
  CHECK(store.add_click(t, 5, 6, Polarity::Positive, "default").prompts == "pos");
  CHECK(status_of([&] { store.add_click(t, 5, 5, Polarity::Positive, "missing"); }) == 404);

  ReferenceGuidance mismatched = g;
  mismatched.positive = BitMask(5, 5);
  mismatched.positive.set(1, 1);
  CHECK(status_of([&] { store.set_reference(t, mismatched); }) == 400);
}

TEST_CASE("ttl eviction") {
  ServiceConfig cfg;
  cfg.ttl = std::chrono::seconds(60);
  SessionStore store(tiny_net(), cfg);
  const std::string id = store.create(test_image(16, 16, 1));
  store.advance_clock_for_testing(std::chrono::seconds(30));
  store.add_click(id, 3, 3, Polarity::Positive);
  store.advance_clock_for_testing(std::chrono::seconds(61));
  CHECK(status_of([&] { store.undo(id); }) == 404);
  CHECK(store.size() == 0);
}

TEST_CASE("interleaved sessions match serial execution") {
  SessionStore store(tiny_net(), {});
  const Image im1 = test_image(20, 20, 7), im2 = test_image(18, 22, 8);
  const std::vector<std::tuple<int, int, Polarity>> script{
      {5, 5, Polarity::Positive}, {15, 3, Polarity::Negative}, {9, 12, Polarity::Positive}, {1, 17, Polarity::Negative}};

  auto run = [&](const std::string& id) {
    std::vector<BitMask> masks;
    for (auto [r, c, p] : script) masks.push_back(store.add_click(id, r, c, p).mask);
    return masks;
  };
  const std::string s1 = store.create(im1), s2 = store.create(im2);
  store.set_reference(s1, guidance());
  const auto serial1 = run(s1);
  const auto serial2 = run(s2);

  for (int round = 0; round < 3; ++round) {
    const std::string p1 = store.create(im1), p2 = store.create(im2);
    store.set_reference(p1, guidance());
    std::vector<BitMask> got1, got2;
    std::thread t1([&] { got1 = run(p1); });
    std::thread t2([&] { got2 = run(p2); });
    t1.join();
    t2.join();
    CHECK(got1 == serial1);
    CHECK(got2 == serial2);
  }
}

TEST_CASE("contours outline the mask") {
  const BitMask m = block(12, 12, 2, 3, 8, 10);
  const Contours c = mask_contours(m);
  REQUIRE(c.size() == 1);
  CHECK(c[0].size() == 4);
  CHECK(mask_contours(BitMask(4, 4)).empty());
}

TEST_CASE("http api") {
  ServiceConfig cfg;
  cfg.max_pixels = 64 * 64;
  SessionService service(tiny_net(), cfg);
  const int port = service.bind_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread server([&] { service.listen_after_bind(); });
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(10, 0);

  auto post = [&](const std::string& path, json body) {
    auto res = cli.Post(path, body.dump(), "application/json");
    REQUIRE(res);
    return std::pair{res->status, json::parse(res->body)};
  };
  auto png = [](const Image& im) { return base64_encode(encode_png(im)); };

  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["api_version"] == kApiVersion);

  auto [st0, e0] = post("/session", {{"image", png(test_image(20, 24, 1))}});
  CHECK(st0 == 400);
  CHECK(e0["error"].get<std::string>().find("api_version") != std::string::npos);

  auto [st_big, e_big] = post("/session", {{"api_version", 1}, {"image", png(test_image(80, 80, 1))}});
  CHECK(st_big == 413);
  auto [st_bad, e_bad] = post("/session", {{"api_version", 1}, {"image", "bm90IGEgcG5n"}});
  CHECK(st_bad == 400);

  auto [st1, created] = post("/session", {{"api_version", 1}, {"image", png(test_image(20, 24, 1))}});
  REQUIRE(st1 == 201);
  const std::string id = created["session_id"];
  CHECK(created["api_version"] == 1);
  CHECK(created["height"] == 20);

  const ReferenceGuidance g = guidance();
  auto [st2, ref] = post("/session/" + id + "/reference",
                         {{"api_version", 1}, {"image", png(g.image)},
                          {"positive", maskops::rle_encode(g.positive)}, {"negative", maskops::rle_encode(g.negative)}});
  CHECK(st2 == 200);
  CHECK(ref["prompts"] == "both");

  std::vector<std::string> masks;
  for (auto [r, c, pol] : {std::tuple{10, 12, "positive"}, {1, 1, "negative"}, {15, 20, "positive"}}) {
    auto [st, out] = post("/session/" + id + "/click", {{"api_version", 1}, {"row", r}, {"col", c}, {"polarity", pol}});
    REQUIRE(st == 200);
    const BitMask m = maskops::rle_decode(out["mask"].get<std::string>());
    CHECK(m.height() == 20);
    CHECK(m.width() == 24);
    CHECK(out["contours"].is_array());
    masks.push_back(out["mask"]);
  }
  auto [st3, undo] = post("/session/" + id + "/undo", {{"api_version", 1}});
  CHECK(st3 == 200);
  CHECK(undo["undone"] == true);
  CHECK(undo["clicks"] == 2);
  CHECK(undo["mask"] == masks[1]);

  auto [st4, oob] = post("/session/" + id + "/click", {{"api_version", 1}, {"row", 20}, {"col", 0}});
  CHECK(st4 == 400);
  auto [st5, reset] = post("/session/" + id + "/reset", {{"api_version", 1}});
  CHECK(st5 == 200);
  auto [st6, replay] = post("/session/" + id + "/click", {{"api_version", 1}, {"row", 10}, {"col", 12}});
  CHECK(st6 == 200);
  CHECK(replay["mask"] == masks[0]);

  auto del = cli.Delete("/session/" + id);
  REQUIRE(del);
  CHECK(del->status == 200);
  auto [st7, gone] = post("/session/" + id + "/click", {{"api_version", 1}, {"row", 1}, {"col", 1}});
  CHECK(st7 == 404);
  CHECK(gone["api_version"] == 1);
  auto [st8, malformed] = post("/session/" + id + "/undo", json("not an object"));
  CHECK(st8 == 400);

  service.stop();
  server.join();
}
