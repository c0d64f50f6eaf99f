#include <gtest/gtest.h>

#include "dgc/arith_data.hpp"
#include "dgc/tokenizer.hpp"

using namespace dgc;

TEST(Tokenizer, MultiDigitOperandsAreSingleTokens) {
  Tokenizer t(TokenizerMode::multi_digit);
  const auto ids = t.encode("157 + 431 = 588; 123 + 456 = ");
  EXPECT_EQ(ids.front(), t.bos());
  EXPECT_EQ(ids.size(), 1u + 19u);  // spaces are tokens
  const auto short_ids = t.encode("347 + 231 = ");
  const std::vector<std::string> want{"347", " ", "+", " ", "231", " ", "=", " "};
  ASSERT_EQ(short_ids.size(), 1u + want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(t.token(short_ids[i + 1]), want[i]);
  EXPECT_EQ(t.encode(""), std::vector<int>{t.bos()});
  EXPECT_EQ(t.token(ids[1]), "157");
  EXPECT_EQ(t.answer_tokens(579), std::vector<int>{t.id("579")});
  EXPECT_EQ(t.answer_token(579), t.id("579"));
}

TEST(Tokenizer, SingleDigitSpellsNumbers) {
  Tokenizer t(TokenizerMode::single_digit);
  EXPECT_EQ(t.vocab_size(), 16u);
  const auto a = t.answer_tokens(579);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(t.token(a[0]), "5");
  EXPECT_EQ(t.token(a[2]), "9");
  EXPECT_EQ(t.answer_token(579), t.id("5"));
}

TEST(Tokenizer, RoundTripAllPrompts) {
  for (auto mode : {TokenizerMode::multi_digit, TokenizerMode::single_digit}) {
    Tokenizer t(mode);
    for (Operator op : {Operator::add, Operator::sub})
      for (const auto& p : generate_simple_dataset(op, 2000, 9)) {
        const auto s = p.render();
        ASSERT_EQ(t.decode(t.encode(s)), s);
      }
  }
}

TEST(Tokenizer, UnknownGlyph) {
  Tokenizer t;
  EXPECT_THROW(t.encode("1 * 2"), TokenizeError);
}
