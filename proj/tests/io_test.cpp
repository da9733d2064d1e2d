/*
 * Copyright (c) 2026, The pacset authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <pacset/io.hpp>

#include <gtest/gtest.h>

#include <sstream>

namespace pacset {
namespace {

using Rows = std::vector<std::vector<double>>;

TEST(Observations, Csv) {
  EXPECT_EQ(parse_observations("1,2.5,-3\n0,0,1e-3\n"), (Rows{{1, 2.5, -3}, {0, 0, 1e-3}}));
  EXPECT_EQ(parse_observations("a,b\n 1 , +2\n\n3,4"), (Rows{{1, 2}, {3, 4}}));
  EXPECT_TRUE(parse_observations("").empty());
}

TEST(Observations, CsvErrors) {
  EXPECT_THROW(parse_observations("1,2\nx,3\n"), ValidationError);
  EXPECT_THROW(parse_observations("1,2\n1,,2\n"), ValidationError);
}

TEST(Observations, Json) {
  EXPECT_EQ(parse_observations(" [[1, 2], [3.5, -4]] "), (Rows{{1, 2}, {3.5, -4}}));
  EXPECT_THROW(parse_observations("[[1, \"a\"]]"), ValidationError);
  EXPECT_THROW(parse_observations("[1, 2]"), ValidationError);
  EXPECT_THROW(parse_observations("[[1, 2]"), ParseError);
}

TEST(Observations, CsvRoundTripIsExact) {
  const Rows rows{{0.1, 1.0 / 3.0, -1e300}, {1e-300, 0, 123456789.125}};
  std::ostringstream os;
  write_observations_csv(os, rows);
  EXPECT_EQ(parse_observations(os.str()), rows);
}

TEST(Observations, MissingFile) { EXPECT_THROW(read_observations("/nonexistent/obs.csv"), IoError); }

TEST(Output, PredictionJsonByModelKind) {
  PackedHeader h;
  h.task = Task::classify;
  h.num_classes = 2;
  Prediction p;
  p.label = 1;
  p.votes = {1, 2};
  IoTrace t;
  t.fetched = {4, 0, 4};
  auto j = prediction_json(h, 3, p, t);
  EXPECT_EQ(j.dump(), R"({"label":1,"obs":3,"unique_blocks":2,"votes":[1,2]})");

  h.kind = EnsembleKind::gradient_boosted;
  p.value = 0.75;
  j = prediction_json(h, 0, p, t);
  EXPECT_EQ(j.at("score"), 0.75);
  EXPECT_FALSE(j.contains("votes"));

  h.task = Task::regress;
  j = prediction_json(h, 0, p, t);
  EXPECT_EQ(j.at("value"), 0.75);
  EXPECT_FALSE(j.contains("label"));

  EXPECT_EQ(trace_json(7, t).dump(), R"({"blocks":[4,0,4],"obs":7,"unique":2})");
}

}  // namespace
}  // namespace pacset
