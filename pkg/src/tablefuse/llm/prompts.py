"""Prompt catalog, one system template per pipeline stage.

Templates are kept verbatim (including their original spelling) because
fixture fingerprints hash the rendered text. Placeholders use ``{name}``
and are substituted with :func:`render`, which refuses to leave any
unresolved.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field


class Purpose(str, enum.Enum):
    MODALITY = "modality"
    FILTER = "filter"
    IMPUTE = "impute"
    SELECT = "select"
    ASSEMBLE_PROCESSORS = "assemble_processors"
    ASSEMBLE_FUSION = "assemble_fusion"
    HPO_DESCRIBE = "hpo_describe"
    HPO_SPACE = "hpo_space"


class PromptError(ValueError):
    pass


MODALITY_SYSTEM = """\
You are a helpful assistant that analyzes data modalities in multimodal Auto-Machine learning task.

Your task is to analyze the data type of each column of the pandas.DataFrame tabular data.

Your answer must be in a strict JSON format: {{"column name": "data type"}}.

You can analyze the data type based on the corresponding column name,column data and the user instructions, which may include the context of tasks/datasets, etc..

You should not omit any column of data in your answer.

Here are some examples for your reference:

{examples}"""

MODALITY_EXAMPLE = """\
Input: instructions:{desc},Date:{data}
Output: {output}"""

MODALITY_USER = """\
Input: instructions:{desc},Date:{data}
Output:"""

FILTER_SYSTEM = """\
You are a helpful assistant that applies feature engineering, especially feature selection.

Given a set of features, your task is to filter out some features that are not relevant to the specific task.

You should filter out the features based on the feature names, feature type and user instrucions, which may contain the context of tasks/datasets, etc..

You cannot forge features that are not in the Input.

In particular, image features should be preserved.

Here are some examples for your reference:

{examples}"""

FILTER_EXAMPLE = """\
Input: instructions:{task}, features type:{feature_type}, features:{features}
Output: {retained}"""

FILTER_USER = """\
Input: instructions:{task}, features type:{feature_type}, features:{features}
Output:"""

IMPUTE_SYSTEM = """\
You are a helpful assistant that applies feature engineering, especially data imputation.

Given a feature sequence, your task is to predict missing values in it. Missing values are represented by "???".

You should predict missing values based on other feature values in the sequence and, you can refer to user instructions, which may contrain context of the task/dataset, etc...

Your output format must be a certain element value, don't reply the reasoning process.

Here are some examples for your reference:

{examples}"""

IMPUTE_EXAMPLE = """\
Input: instructions:{task}, feature sequence:{sequence}
Output: {value}"""

IMPUTE_USER = """\
Input: instructions:{task}, feature sequence:{sequence}
Output:"""

HPO_SPACE_SYSTEM = """\
You are a helpful assistant that infers the hyperparameters and their search ranges for hyperparameter optimization in machine learning task.

You can use the format:[,,,] to represent a discrete search range.

You can choose up 3 hyperparameters that you think are most suitable for hyperparameter optimization.

Your answer must be in a strict JSON format: {{"hyperparameter_name":"search_range"}}.

Here are some things you need to focus on:

(1).If the values in the search space are of type INT or FLOAT, then the search space needs to have at least 3 values.

(2).The search ranges should refer to the original value of the config. The search ranges should include the original value of the config.

(3).You should not output the hyperparameters don't need to optimize.

(4).You cannot forge parameters that are not in the configuration file.

(5).If the "checkpoint_name" is in config, only the "loss_weight" is taken."""

HPO_SPACE_USER = """\
Here are some comments to help you understand the parameters better: {descriptions}

Given the config as follow: {config}

Given the user requirements: {requirements}

Your answer:"""

HPO_DESCRIBE_SYSTEM = """\
You are a helpful assistant that explains training configuration files for machine learning tasks.

For every hyperparameter in the given config, write one sentence describing what it controls and how changing it affects training.

Your answer must be in a strict JSON format: {{"hyperparameter_name": "description"}}.

You should not omit any hyperparameter of the config in your answer."""

HPO_DESCRIBE_USER = """\
Given the config as follow: {config}

Your answer:"""

SELECT_SYSTEM = """\
I am a deep learning software develop engineer, you're a code compiler, and we're working together on a multimodal Auto-Machine learning task.

Given the dataset description and user request , your task is to help the user to select a suitable model.

You should focus more on the description of the models and find the model that has the most potential to solve requests and tasks.

Your answer must be in a strict JSON format: {{"name": "model name", "reason": "your reasons to select the model"}}.
Please choose the most suitable model from:
{model_cards}"""

SELECT_USER = """\
User: Assume we have a dataset:{data_desc} and user request: {user_request},please select the most suitable model.

Your answer:"""

PROCESSORS_SYSTEM = """\
You are a helpful assistant that writes data processors code to load different types of data for multimodal Auto-Machine learning task.

Since different types of models need different data preprocessing, your task is to write a function to return the corresponding data processors based on models' config.

Specifically, you do not need to define the data processor for fusion model, and the label data processor is also required to provide label data for each model.

The function return must be in a strict dict format: {{"data type": "data processor"}}.

Please specify the library you imported in the code.

Here are some data processors code for you reference:

from multimodal.data import ImageProcessor

class ImageProcessor:
    def __init__(self,model_config):
        ...

from multimodal.data import TextProcessor

class TextProcessor:
    def __init__(self,model_config):
        ...

from multimodal.data import CategoricalProcessor

class CategoricalProcessor:
    def __init__(self,model_config):
        ...

..."""

PROCESSORS_USER = """\
Given some models' config as follow:{configs}

Your answer:"""

FUSION_SYSTEM = """\
You are a helpful assistant that writes the Deep learning model code.
You task is to write a fusion model to fuse different base models' features.
Use # before every line except the python code.
Here are some model code for you reference:

from multimodal.models import CategoricalTransformer

class CategoricalTransformer(nn.Module):
    def __init__(self,model_config):
        ...

from multimodal.models import NumericalTransformer

class NumericalTransformer(nn.Module):
    def __init__(self,model_config):
        ...

from multimodal.models import TimmAutoModelForImagePrediction

class TimmAutoModelForImagePrediction(nn.Module):
    def __init__(self,model_config):
        ...

from multimodal.models import HFAutoModelForTextPrediction

class HFAutoModelForTextPrediction(nn.Module):
    def __init__(self,model_config):
        ...

Given some base models' config as follow:{base_configs};
Give the fusion model config as follow:
{fusion_config}

You should then respond to me the code with:

1). Fusion technique should be learnable, MLP is recommended.

2). The fusion model structure should be defined as fusion_model and fusion_head,which output features and logits, respectively.

3). Base models instance should be defined in Fusion model Class.You should not change the value of the output of base model instances.

4). All base models have a uniform variable(self.out_features_dim) to represent the output features dimension.

5). Finding the maximum dimension of all base models' output features, and define learnable linear layers to adapt all base models' output features to the maximum dimension as the input of fusion_model. For example, if three models have feature dimensions are [512, 768, 64], it will linearly map all the features to dimension 768.

6). Output the logits,features,loss weights of fusion model and base models.The return must be in a JSON format: {{model_name:{{"logits":...,"features":...,"weight":...}}}}.

7). All the network layers and variable self.model_name,self.loss_weight should be defined in function __init__, not in function forward.

8). Some variables are not present in each model's config,you cannot use a variable that does not exist in the corresponding model config.

You should only respond in the format as described below :

Class Fusion:
    def __init__(self,...)
    ...
    def forward(self,batch)
    ...
    fusion_features = self.fusion_model(...)
    fusion_logits   = self.fusion_head(fusion_features)
    ..."""

FUSION_USER = "Please write the fusion model code now."

CORRECTIVE_JSON = "Your previous answer was not valid JSON; answer with JSON only."

_PLACEHOLDER = re.compile(r"(?<!\{)\{[A-Za-z_][A-Za-z0-9_]*\}(?!\})")


def render(template: str, **values) -> str:
    """``str.format`` that fails if any placeholder survives substitution."""
    try:
        text = template.format(**values)
    except KeyError as exc:
        raise PromptError(f"missing prompt value {exc.args[0]!r}") from None
    return text


def unresolved_placeholders(text: str) -> list[str]:
    return _PLACEHOLDER.findall(text)


@dataclass(frozen=True)
class PromptBundle:
    purpose: Purpose
    system_text: str
    user_text: str
    few_shot_blocks: tuple[tuple[str, str], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "purpose", Purpose(self.purpose))
        object.__setattr__(self, "few_shot_blocks", tuple(tuple(b) for b in self.few_shot_blocks))

    def with_correction(self, message: str = CORRECTIVE_JSON) -> "PromptBundle":
        return PromptBundle(self.purpose, self.system_text, f"{self.user_text}\n\n{message}", self.few_shot_blocks)
