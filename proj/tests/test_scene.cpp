#include <gtest/gtest.h>

#include "b2n3d/dataset_io.hpp"
#include "b2n3d/scene.hpp"
#include "b2n3d/synthetic.hpp"

using namespace b2n;

namespace {

Scene three_objects() {
  Scene s;
  s.objects = {{0, "chair", Box3{{0, 0, 0.5}, {1, 1, 1}}},
               {1, "table", Box3{{3, 0, 0.5}, {2, 1, 1}}},
               {2, "chair", Box3{{6, 0, 0.5}, {1, 1, 1}}}};
  s.target_id = 1;
  return s;
}

}  // namespace

TEST(ValidateScene, WellFormedSceneHasNoViolations) {
  EXPECT_TRUE(validate_scene(three_objects(), default_vocabulary(6)).empty());
}

TEST(ValidateScene, TargetOutOfRange) {
  Scene s = three_objects();
  s.target_id = 5;
  const auto report = validate_scene(s, default_vocabulary(6));
  ASSERT_EQ(report.size(), 1u);
  EXPECT_EQ(report[0], "target out of range");
}

TEST(ValidateScene, NonPositiveSize) {
  Scene s = three_objects();
  s.objects[0].box.size = {1, 0, 1};
  const auto report = validate_scene(s, default_vocabulary(6));
  ASSERT_EQ(report.size(), 1u);
  EXPECT_NE(report[0].find("non-positive size"), std::string::npos);
}

TEST(ValidateScene, FlagsIdGapsUnknownCategoriesAndSmallScenes) {
  Scene s = three_objects();
  s.objects[2].id = 7;
  s.objects[1].category = "spaceship";
  EXPECT_EQ(validate_scene(s, default_vocabulary(6)).size(), 2u);

  Scene tiny;
  tiny.objects = {{0, "chair", Box3{}}};
  EXPECT_FALSE(validate_scene(tiny, default_vocabulary(6)).empty());
}

TEST(ValidateScene, RejectsScenesAboveTheCap) {
  Scene s;
  for (int i = 0; i < 5; ++i) s.objects.push_back({i, "chair", Box3{{2.0 * i, 0, 0.5}, {1, 1, 1}}});
  EXPECT_TRUE(validate_scene(s, default_vocabulary(6), 5).empty());
  EXPECT_FALSE(validate_scene(s, default_vocabulary(6), 4).empty());
}

TEST(Box3, GeometryHelpers) {
  Box3 a{{0, 0, 0}, {2, 2, 2}}, b{{3, 4, 0}, {1, 1, 1}};
  EXPECT_DOUBLE_EQ(center_distance(a, b), 5.0);
  EXPECT_DOUBLE_EQ(a.volume(), 8.0);
  EXPECT_DOUBLE_EQ(a.min(0), -1.0);
  EXPECT_DOUBLE_EQ(a.max(2), 1.0);
  EXPECT_FALSE(boxes_overlap(a, b));
  EXPECT_TRUE(boxes_overlap(a, Box3{{1, 1, 1}, {1, 1, 1}}));
  // touching faces do not overlap
  EXPECT_FALSE(boxes_overlap(a, Box3{{2, 0, 0}, {2, 2, 2}}));
}

TEST(CategoryPair, IsUnordered) {
  EXPECT_EQ(CategoryPair("table", "chair"), CategoryPair("chair", "table"));
  EXPECT_TRUE(CategoryPair("a", "b").matches("b", "a"));
}

TEST(DatasetIo, RoundTripIsBitExactForGeneratedRecords) {
  GenConfig cfg;
  cfg.seed = 11;
  for (const auto& r : generate_records(cfg, 50)) {
    const Record back = deserialize_record(serialize_record(r));
    EXPECT_EQ(back.scene, r.scene);
    EXPECT_EQ(back.utterance, r.utterance);
  }
}

TEST(DatasetIo, RoundTripPreservesAwkwardDoubles) {
  Record r;
  r.scene = three_objects();
  r.scene.objects[0].box.center = {0.1 + 0.2, 1.0 / 3.0, 1e-300};
  r.scene.objects[0].box.size = {std::nextafter(1.0, 2.0), 123456789.123456789, 5e-324};
  r.utterance = {"the table between the chair and the chair", {{CategoryPair("table", "chair")}}, "table", 1};
  const Record back = deserialize_record(serialize_record(r));
  EXPECT_EQ(back.scene, r.scene);
}

TEST(DatasetIo, FieldNames) {
  const auto j = to_json(generate_records(GenConfig{}, 1)[0]);
  for (const char* key : {"objects", "target_id", "text", "pairs", "target_category", "rn", "seed"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  for (const char* key : {"id", "category", "center", "size"}) EXPECT_TRUE(j["objects"][0].contains(key)) << key;
}

TEST(DatasetIo, MalformedLineIsAnInputError) {
  EXPECT_THROW(deserialize_record("{not json"), InputError);
  EXPECT_THROW(deserialize_record(R"({"objects": []})"), InputError);
}
