#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tlkit/checkpoint.hpp"

using namespace tlkit;

TEST(Checkpoint, RoundTripIsByteIdentical) {
    Rng rng(9);
    Checkpoint ckpt;
    ckpt.push_back(to_entry("a/w", testutil::rand_tensor(rng, {3, 4})));
    ckpt.push_back(to_entry("a/b", testutil::rand_tensor(rng, {4})));
    ckpt.push_back(to_entry("deep/nested/name", testutil::rand_tensor(rng, {2, 2, 2})));
    const std::string bytes = serialize_checkpoint(ckpt);
    const Checkpoint parsed = parse_checkpoint(bytes);
    ASSERT_EQ(parsed.size(), ckpt.size());
    EXPECT_EQ(serialize_checkpoint(parsed), bytes);
    EXPECT_EQ(parsed[2].name, "deep/nested/name");
    EXPECT_EQ(parsed[2].shape, (Shape{2, 2, 2}));
}

TEST(Checkpoint, ValuesSurviveAtF32Precision) {
    Tensor t({3}, {1.0, -0.125, 3.141592653589793});
    const Checkpoint parsed = parse_checkpoint(serialize_checkpoint({to_entry("x", t)}));
    Tensor back({3});
    entry_to_tensor(parsed[0], back);
    EXPECT_DOUBLE_EQ(back(0), 1.0);
    EXPECT_DOUBLE_EQ(back(1), -0.125);
    EXPECT_DOUBLE_EQ(back(2), static_cast<double>(static_cast<float>(3.141592653589793)));
}

TEST(Checkpoint, MagicStartsTheFile) {
    const std::string bytes = serialize_checkpoint({});
    ASSERT_GE(bytes.size(), 6u);
    EXPECT_EQ(bytes.substr(0, 6), "TLKT1\n");
}

TEST(Checkpoint, BadMagicIsCleanError) {
    EXPECT_THROW(parse_checkpoint("NOTCKPT"), CheckpointError);
    EXPECT_THROW(parse_checkpoint(""), CheckpointError);
}

TEST(Checkpoint, TruncatedRecordIsCleanError) {
    Checkpoint ckpt{to_entry("x", Tensor::full({4}, 2.0))};
    std::string bytes = serialize_checkpoint(ckpt);
    bytes.resize(bytes.size() - 5);
    EXPECT_THROW(parse_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
    const Checkpoint parsed =
        parse_checkpoint(serialize_checkpoint({to_entry("layer/w", Tensor::full({2, 2}, 1.0))}));
    Tensor wrong({3, 2});
    try {
        entry_to_tensor(parsed[0], wrong);
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("layer/w"), std::string::npos);
    }
}

TEST(Checkpoint, FileRoundTrip) {
    Rng rng(21);
    Checkpoint ckpt{to_entry("p", testutil::rand_tensor(rng, {5, 3}))};
    const std::string path = ::testing::TempDir() + "/ckpt_roundtrip.tlkt";
    save_checkpoint(path, ckpt);
    const Checkpoint loaded = load_checkpoint(path);
    EXPECT_EQ(serialize_checkpoint(loaded), serialize_checkpoint(ckpt));
}

TEST(Checkpoint, UnwritablePathIsIoError) {
    EXPECT_THROW(save_checkpoint("/nonexistent-dir/x.tlkt", {}), IoError);
    EXPECT_THROW(load_checkpoint("/nonexistent-dir/x.tlkt"), IoError);
}
