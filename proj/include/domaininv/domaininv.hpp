#pragma once

#include "domaininv/adaptation.hpp"
#include "domaininv/checkpoint.hpp"
#include "domaininv/data.hpp"
#include "domaininv/discrepancy.hpp"
#include "domaininv/domain_transform.hpp"
#include "domaininv/metrics.hpp"
#include "domaininv/optimizer.hpp"
#include "domaininv/qa_model.hpp"
#include "domaininv/rng.hpp"
#include "domaininv/tensor.hpp"
#include "domaininv/pipeline.hpp"
