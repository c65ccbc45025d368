#pragma once

#include "kgctx/config.hpp"
#include "kgctx/decoder_ranker.hpp"
#include "kgctx/evaluator.hpp"
#include "kgctx/io.hpp"
#include "kgctx/kg_store.hpp"
#include "kgctx/kge.hpp"
#include "kgctx/model.hpp"
#include "kgctx/pipeline.hpp"
#include "kgctx/rng.hpp"
#include "kgctx/synth.hpp"
#include "kgctx/text_store.hpp"
#include "kgctx/tokenizer.hpp"
#include "kgctx/verbalizer.hpp"
